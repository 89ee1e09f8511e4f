//! On-disk bundle format shared by datasets and model checkpoints.
//!
//! A bundle is two files: a UTF-8 manifest of `key=value` lines and a binary
//! blob next to it (`<manifest>.bin`). The blob is
//!
//! ```text
//! "MTNF" | version: u32 LE | record*
//! record = name_len: u16 LE | name bytes | rank: u8 | dims: rank × u32 LE | payload
//! ```
//!
//! Payloads are little-endian `f64` or `i32`; the dtype and order of every
//! record are declared in the manifest's `arrays` key. The manifest also
//! carries the SHA-256 of the blob.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"MTNF";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered `key=value` document.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvDoc {
    pairs: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing an existing value in place.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.pairs.iter_mut().find(|(k, _)| *k == key) {
            Some(pair) => pair.1 = value,
            None => self.pairs.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, FormatError> {
        self.get(key)
            .ok_or_else(|| FormatError::Manifest(format!("missing key `{key}`")))
    }

    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<T, FormatError> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| FormatError::Manifest(format!("cannot parse `{key}={raw}`")))
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Keys starting with `prefix`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> KvDoc {
        KvDoc {
            pairs: self
                .pairs
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &KvDoc) {
        for (k, v) in &other.pairs {
            self.set(format!("{prefix}{k}"), v);
        }
    }

    pub fn parse(text: &str) -> Result<KvDoc, FormatError> {
        let mut doc = KvDoc::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FormatError::Manifest(format!("line {}: expected key=value", n + 1)))?;
            doc.set(k.trim(), v.trim());
        }
        Ok(doc)
    }
}

impl fmt::Display for KvDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.pairs {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    I32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::I32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::I32 => "i32",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::I32(_) => Dtype::I32,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }
}

/// A named, shaped array record.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn f64(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Array {
            name: name.into(),
            dims,
            data: ArrayData::F64(data),
        }
    }

    pub fn i32(name: impl Into<String>, dims: Vec<usize>, data: Vec<i32>) -> Self {
        Array {
            name: name.into(),
            dims,
            data: ArrayData::I32(data),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64], FormatError> {
        match &self.data {
            ArrayData::F64(v) => Ok(v),
            ArrayData::I32(_) => Err(FormatError::Record(format!("{} is not f64", self.name))),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32], FormatError> {
        match &self.data {
            ArrayData::I32(v) => Ok(v),
            ArrayData::F64(_) => Err(FormatError::Record(format!("{} is not i32", self.name))),
        }
    }
}

pub fn encode_blob(arrays: &[Array]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for a in arrays {
        debug_assert_eq!(a.dims.iter().product::<usize>(), a.data.len());
        let name = a.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(a.dims.len() as u8);
        for &d in &a.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &a.data {
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Checks magic and version without touching the records.
pub fn check_header(bytes: &[u8]) -> Result<(), FormatError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    Ok(())
}

/// Decodes the records declared by `(name, dtype)`, in order.
pub fn decode_blob(bytes: &[u8], declared: &[(String, Dtype)]) -> Result<Vec<Array>, FormatError> {
    check_header(bytes)?;
    let mut cur = Cursor { bytes, pos: 8 };
    let mut arrays = Vec::with_capacity(declared.len());
    for (want, dtype) in declared {
        let name_len = u16::from_le_bytes(cur.take(2, want)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(name_len, want)?)
            .map_err(|_| FormatError::Record("array name is not UTF-8".into()))?;
        if name != want {
            return Err(FormatError::Record(format!("expected array `{want}`, found `{name}`")));
        }
        let rank = cur.take(1, want)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32(want)? as usize);
        }
        let count: usize = dims.iter().product();
        let payload = cur.take(
            count
                .checked_mul(dtype.width())
                .ok_or_else(|| FormatError::Record(format!("{want}: size overflow")))?,
            want,
        )?;
        let data = match dtype {
            Dtype::F64 => ArrayData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::I32 => ArrayData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        arrays.push(Array {
            name: want.clone(),
            dims,
            data,
        });
    }
    if cur.pos != bytes.len() {
        return Err(FormatError::Record(format!(
            "{} trailing bytes after last record",
            bytes.len() - cur.pos
        )));
    }
    Ok(arrays)
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Path of the blob that accompanies the manifest at `manifest`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn declared_list(arrays: &[Array]) -> String {
    arrays
        .iter()
        .map(|a| format!("{}:{}", a.name, a.data.dtype().name()))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_declared(raw: &str) -> Result<Vec<(String, Dtype)>, FormatError> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|item| {
            let (name, ty) = item
                .split_once(':')
                .ok_or_else(|| FormatError::Manifest(format!("bad array declaration `{item}`")))?;
            let dtype = match ty {
                "f64" => Dtype::F64,
                "i32" => Dtype::I32,
                other => return Err(FormatError::Manifest(format!("unknown dtype `{other}`"))),
            };
            Ok((name.to_string(), dtype))
        })
        .collect()
}

/// Writes `meta` plus the bookkeeping keys (`version`, `blob`, `arrays`,
/// `checksum`) to `manifest`, and the encoded arrays to its blob.
pub fn write_bundle(manifest: &Path, meta: &KvDoc, arrays: &[Array]) -> Result<()> {
    let blob = encode_blob(arrays);
    let blob_file = blob_path(manifest);
    let mut doc = KvDoc::new();
    doc.set("version", FORMAT_VERSION);
    doc.extend_prefixed("", meta);
    doc.set(
        "blob",
        blob_file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    );
    doc.set("arrays", declared_list(arrays));
    doc.set("checksum", format!("sha256:{}", sha256_hex(&blob)));
    fs::write(&blob_file, &blob).map_err(io_err(&blob_file))?;
    fs::write(manifest, doc.to_string()).map_err(io_err(manifest))?;
    Ok(())
}

/// Reads a bundle written by [`write_bundle`], verifying header, checksum
/// and record layout.
pub fn read_bundle(manifest: &Path) -> Result<(KvDoc, Vec<Array>)> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let doc = KvDoc::parse(&text)?;
    let version: u32 = doc.parse_key("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        }
        .into());
    }
    let blob_file = manifest
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(doc.require("blob")?);
    let bytes = fs::read(&blob_file).map_err(io_err(&blob_file))?;
    check_header(&bytes)?;
    let expected = doc
        .require("checksum")?
        .strip_prefix("sha256:")
        .ok_or_else(|| FormatError::Manifest("checksum must be sha256:<hex>".into()))?
        .to_string();
    let actual = sha256_hex(&bytes);
    if expected != actual {
        return Err(FormatError::ChecksumMismatch { expected, actual }.into());
    }
    let declared = parse_declared(doc.require("arrays")?)?;
    let arrays = decode_blob(&bytes, &declared)?;
    Ok((doc, arrays))
}

/// Finds the record called `name`.
pub fn find<'a>(arrays: &'a [Array], name: &str) -> Result<&'a Array, FormatError> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| FormatError::Record(format!("missing array `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Array> {
        vec![
            Array::f64("x", vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]),
            Array::i32("labels", vec![3], vec![0, -1, 7]),
        ]
    }

    fn declared() -> Vec<(String, Dtype)> {
        vec![("x".into(), Dtype::F64), ("labels".into(), Dtype::I32)]
    }

    #[test]
    fn blob_layout_is_exact() {
        let blob = encode_blob(&[Array::i32("ab", vec![1], vec![258])]);
        assert_eq!(
            blob,
            vec![b'M', b'T', b'N', b'F', 1, 0, 0, 0, 2, 0, b'a', b'b', 1, 1, 0, 0, 0, 2, 1, 0, 0]
        );
    }

    #[test]
    fn blob_round_trip() {
        let arrays = sample();
        let decoded = decode_blob(&encode_blob(&arrays), &declared()).unwrap();
        assert_eq!(decoded, arrays);
        // -0.0 survives bit-for-bit
        assert_eq!(decoded[0].as_f64().unwrap()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut blob = encode_blob(&sample());
        blob[0] = b'X';
        let e = decode_blob(&blob, &declared()).unwrap_err();
        assert!(matches!(e, FormatError::BadMagic(_)));

        let mut blob = encode_blob(&sample());
        blob[4] = 9;
        let e = decode_blob(&blob, &declared()).unwrap_err();
        assert_eq!(e, FormatError::VersionMismatch { expected: 1, found: 9 });

        let blob = encode_blob(&sample());
        let e = decode_blob(&blob[..blob.len() - 3], &declared()).unwrap_err();
        assert!(matches!(e, FormatError::Truncated(_)));

        let codes = [
            FormatError::BadMagic(*b"XXXX").code(),
            FormatError::VersionMismatch { expected: 1, found: 2 }.code(),
            FormatError::ChecksumMismatch {
                expected: String::new(),
                actual: String::new(),
            }
            .code(),
            FormatError::Truncated(String::new()).code(),
        ];
        let mut sorted = codes.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
    }

    #[test]
    fn kv_doc_parse_and_print() {
        let doc = KvDoc::parse("# comment\na=1\n\nb = two\na=3\n").unwrap();
        assert_eq!(doc.get("a"), Some("3"));
        assert_eq!(doc.parse_key::<String>("b").unwrap(), "two");
        assert!(doc.parse_key::<u32>("b").is_err());
        assert_eq!(KvDoc::parse(&doc.to_string()).unwrap(), doc);
        assert!(KvDoc::parse("novalue").is_err());
    }

    #[test]
    fn bundle_round_trip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.manifest");
        let mut meta = KvDoc::new();
        meta.set("kind", "test");
        write_bundle(&path, &meta, &sample()).unwrap();
        let (doc, arrays) = read_bundle(&path).unwrap();
        assert_eq!(doc.get("kind"), Some("test"));
        assert_eq!(arrays, sample());

        let blob_file = blob_path(&path);
        let mut bytes = fs::read(&blob_file).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&blob_file, &bytes).unwrap();
        match read_bundle(&path) {
            Err(Error::Format(FormatError::ChecksumMismatch { .. })) => {}
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }
}
