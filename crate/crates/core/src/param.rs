//! Flat parameter vectors with a named, shaped manifest.

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered `(name, shape, offset)` list describing a flat parameter layout.
/// Offsets are contiguous and non-overlapping by construction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        let entry = ParamEntry {
            name: name.into(),
            shape,
            offset: self.total,
        };
        self.total += entry.len();
        self.entries.push(entry);
    }

    /// Appends every entry of `other` with `prefix` prepended to its name.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Manifest) {
        for e in &other.entries {
            self.push(format!("{prefix}{}", e.name), e.shape.clone());
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Learnable scalars of an operator (or a gradient with the same layout).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    manifest: Manifest,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(manifest: Manifest) -> Self {
        let values = vec![0.0; manifest.total()];
        ParamVector { manifest, values }
    }

    pub fn from_values(manifest: Manifest, values: Vec<f64>) -> Result<Self> {
        check_dim("parameter vector length", manifest.total(), values.len())?;
        Ok(ParamVector { manifest, values })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let e = self
            .manifest
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("no parameter named {name}")))?;
        Ok(&self.values[e.range()])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.manifest == other.manifest
    }

    /// Largest absolute entry; 0 for an empty vector.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Sequential writer that fills a flat buffer entry by entry.
pub(crate) struct Packer<'a> {
    out: &'a mut [f64],
    pos: usize,
}

impl<'a> Packer<'a> {
    pub(crate) fn new(out: &'a mut [f64]) -> Self {
        Packer { out, pos: 0 }
    }

    pub(crate) fn put(&mut self, src: &[f64]) {
        self.out[self.pos..self.pos + src.len()].copy_from_slice(src);
        self.pos += src.len();
    }
}

/// Sequential reader mirroring [`Packer`].
pub(crate) struct Unpacker<'a> {
    src: &'a [f64],
    pos: usize,
}

impl<'a> Unpacker<'a> {
    pub(crate) fn new(src: &'a [f64]) -> Self {
        Unpacker { src, pos: 0 }
    }

    pub(crate) fn take(&mut self, dst: &mut [f64]) {
        dst.copy_from_slice(&self.src[self.pos..self.pos + dst.len()]);
        self.pos += dst.len();
    }
}
