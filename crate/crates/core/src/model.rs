//! Answer classifier: optional attention stage, fusion, softmax over answers.

use std::path::Path;

use crate::attention::{self, AttentionCache, RegionGrid};
use crate::error::{check_dim, Error, Result};
use crate::format::{self, Array, KvDoc};
use crate::fusion::{FusionCache, FusionConfig, FusionOperator, FusionParams, Scheme};
use crate::param::{Manifest, ParamVector};
use crate::tensor::{argmax, axpy, softmax};

/// Visual input: a single feature vector, or a grid of regions for models
/// with an attention stage.
#[derive(Clone, Debug, PartialEq)]
pub enum Visual {
    Vector(Vec<f64>),
    Grid(RegionGrid),
}

impl Visual {
    pub fn as_ref(&self) -> VisualRef<'_> {
        match self {
            Visual::Vector(v) => VisualRef::Vector(v),
            Visual::Grid(g) => VisualRef::Grid(g),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum VisualRef<'a> {
    Vector(&'a [f64]),
    Grid(&'a RegionGrid),
}

impl<'a> From<&'a [f64]> for VisualRef<'a> {
    fn from(v: &'a [f64]) -> Self {
        VisualRef::Vector(v)
    }
}

impl<'a> From<&'a Vec<f64>> for VisualRef<'a> {
    fn from(v: &'a Vec<f64>) -> Self {
        VisualRef::Vector(v)
    }
}

impl<'a, const N: usize> From<&'a [f64; N]> for VisualRef<'a> {
    fn from(v: &'a [f64; N]) -> Self {
        VisualRef::Vector(v)
    }
}

impl<'a> From<&'a RegionGrid> for VisualRef<'a> {
    fn from(g: &'a RegionGrid) -> Self {
        VisualRef::Grid(g)
    }
}

impl<'a> From<&'a Visual> for VisualRef<'a> {
    fn from(v: &'a Visual) -> Self {
        v.as_ref()
    }
}

/// Region scorer plus glimpse count.
#[derive(Clone, Debug)]
pub struct AttentionStage {
    pub scorer: FusionOperator,
}

impl AttentionStage {
    pub fn glimpses(&self) -> usize {
        self.scorer.config().d_out
    }
}

#[derive(Clone, Debug)]
pub struct VqaModel {
    fusion: FusionOperator,
    attention: Option<AttentionStage>,
}

/// Forward state for [`VqaModel::backward_into`].
#[derive(Clone, Debug)]
pub struct ModelCache {
    fusion: FusionCache,
    attention: Option<AttentionCache>,
}

/// Gradient buffers with the same layout as the model's parameters.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub scorer: Option<FusionParams>,
    pub fusion: FusionParams,
}

impl ModelGrads {
    pub fn zero(&mut self) {
        if let Some(s) = &mut self.scorer {
            s.fill(0.0);
        }
        self.fusion.fill(0.0);
    }

    /// Packs in manifest order (attention first, then fusion).
    pub fn pack_into(&self, out: &mut [f64]) {
        let split = self.scorer.as_ref().map_or(0, FusionParams::len);
        if let Some(s) = &self.scorer {
            s.pack_into(&mut out[..split]);
        }
        self.fusion.pack_into(&mut out[split..]);
    }
}

impl VqaModel {
    /// A model without attention; the fusion's `d_out` is the answer count.
    pub fn new(fusion: FusionOperator) -> Self {
        VqaModel {
            fusion,
            attention: None,
        }
    }

    /// A model whose fusion consumes the `g · d_v` glimpse concatenation
    /// produced by `scorer` (with `d_out = g`).
    pub fn with_attention(fusion: FusionOperator, scorer: FusionOperator) -> Result<Self> {
        let (fc, sc) = (fusion.config(), scorer.config());
        check_dim("attention scorer d_q vs fusion d_q", fc.d_q, sc.d_q)?;
        check_dim("fusion d_v vs glimpses * region dim", sc.d_out * sc.d_v, fc.d_v)?;
        Ok(VqaModel {
            fusion,
            attention: Some(AttentionStage { scorer }),
        })
    }

    pub fn fusion(&self) -> &FusionOperator {
        &self.fusion
    }

    pub fn attention(&self) -> Option<&AttentionStage> {
        self.attention.as_ref()
    }

    pub fn answer_count(&self) -> usize {
        self.fusion.config().d_out
    }

    pub fn d_q(&self) -> usize {
        self.fusion.config().d_q
    }

    /// Dimension of one visual vector (per region for attention models).
    pub fn region_dim(&self) -> usize {
        match &self.attention {
            Some(a) => a.scorer.config().d_v,
            None => self.fusion.config().d_v,
        }
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        if let Some(a) = &self.attention {
            m.extend_prefixed("attention.", &a.scorer.manifest());
        }
        m.extend_prefixed("fusion.", &self.fusion.manifest());
        m
    }

    pub fn param_count(&self) -> usize {
        self.manifest().total()
    }

    pub fn pack(&self) -> ParamVector {
        let mut pv = ParamVector::zeros(self.manifest());
        let split = self.scorer_len();
        if let Some(a) = &self.attention {
            a.scorer.params().pack_into(&mut pv.values_mut()[..split]);
        }
        self.fusion.params().pack_into(&mut pv.values_mut()[split..]);
        pv
    }

    fn scorer_len(&self) -> usize {
        self.attention.as_ref().map_or(0, |a| a.scorer.param_count())
    }

    pub fn unpack_values(&mut self, values: &[f64]) -> Result<()> {
        check_dim("model parameter vector", self.param_count(), values.len())?;
        let split = self.scorer_len();
        if let Some(a) = &mut self.attention {
            a.scorer.unpack_values(&values[..split])?;
        }
        self.fusion.unpack_values(&values[split..])
    }

    pub fn unpack(&mut self, pv: &ParamVector) -> Result<()> {
        if *pv.manifest() != self.manifest() {
            return Err(Error::InvalidConfig("parameter layout does not match model".into()));
        }
        self.unpack_values(pv.values())
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            scorer: self.attention.as_ref().map(|a| a.scorer.zero_grads()),
            fusion: self.fusion.zero_grads(),
        }
    }

    fn input_mismatch(&self) -> Error {
        if self.attention.is_some() {
            Error::Unsupported("attention model expects a region grid".into())
        } else {
            Error::Unsupported("model has no attention stage; expected a feature vector".into())
        }
    }

    /// Fusion input `v`: the feature vector itself, or the attended glimpses.
    fn fused_visual(&self, q: &[f64], visual: VisualRef<'_>) -> Result<Vec<f64>> {
        match (&self.attention, visual) {
            (None, VisualRef::Vector(v)) => Ok(v.to_vec()),
            (Some(a), VisualRef::Grid(g)) => Ok(attention::attend(&a.scorer, g, q)?.1),
            _ => Err(self.input_mismatch()),
        }
    }

    /// Pre-softmax answer scores `y`.
    pub fn logits<'a>(&self, q: &[f64], visual: impl Into<VisualRef<'a>>) -> Result<Vec<f64>> {
        let v = self.fused_visual(q, visual.into())?;
        Ok(self.fusion.forward(q, &v)?.0)
    }

    /// `(softmax(y), argmax y)`, lowest index on ties.
    pub fn predict<'a>(&self, q: &[f64], visual: impl Into<VisualRef<'a>>) -> Result<(Vec<f64>, usize)> {
        let y = self.logits(q, visual)?;
        let idx = argmax(&y);
        Ok((softmax(&y), idx))
    }

    /// Pre-softmax scores with every `z_r` but `keep` zeroed in the answer
    /// fusion (0-based rank index). The attention stage is left intact.
    pub fn logits_rank_masked<'a>(&self, q: &[f64], visual: impl Into<VisualRef<'a>>, keep: usize) -> Result<Vec<f64>> {
        let v = self.fused_visual(q, visual.into())?;
        Ok(self.fusion.forward_masked(q, &v, keep)?.0)
    }

    pub fn rank_masked_predict<'a>(&self, q: &[f64], visual: impl Into<VisualRef<'a>>, keep: usize) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits_rank_masked(q, visual, keep)?))
    }

    pub fn forward_train<'a>(&self, q: &[f64], visual: impl Into<VisualRef<'a>>) -> Result<(Vec<f64>, ModelCache)> {
        match (&self.attention, visual.into()) {
            (None, VisualRef::Vector(v)) => {
                let (y, fusion) = self.fusion.forward(q, v)?;
                Ok((y, ModelCache { fusion, attention: None }))
            }
            (Some(a), VisualRef::Grid(g)) => {
                let (pooled, att) = attention::attend_with_cache(&a.scorer, g, q)?;
                let (y, fusion) = self.fusion.forward(q, &pooled)?;
                Ok((
                    y,
                    ModelCache {
                        fusion,
                        attention: Some(att),
                    },
                ))
            }
            _ => Err(self.input_mismatch()),
        }
    }

    /// Accumulates parameter gradients for upstream `∂L/∂y`; returns `∂L/∂q`.
    pub fn backward_into<'a>(
        &self,
        visual: impl Into<VisualRef<'a>>,
        cache: &ModelCache,
        d_y: &[f64],
        grads: &mut ModelGrads,
    ) -> Result<Vec<f64>> {
        let (mut d_q, d_v) = self.fusion.backward_into(&cache.fusion, d_y, &mut grads.fusion)?;
        if let (Some(a), Some(att), VisualRef::Grid(g)) = (&self.attention, &cache.attention, visual.into()) {
            let scorer_grads = grads
                .scorer
                .as_mut()
                .ok_or_else(|| Error::InvalidConfig("gradient buffer lacks attention".into()))?;
            let dq_att = attention::attend_backward(&a.scorer, g, att, &d_v, scorer_grads)?;
            axpy(1.0, &dq_att, &mut d_q);
        }
        Ok(d_q)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("kind", "model");
        doc.set("answers", self.answer_count());
        doc.set(
            "glimpses",
            self.attention.as_ref().map_or(0, AttentionStage::glimpses),
        );
        doc.extend_prefixed("fusion.", &self.fusion.config().to_kv());
        if let Some(a) = &self.attention {
            doc.extend_prefixed("attention.", &a.scorer.config().to_kv());
        }
        doc
    }

    /// Rebuilds the operators from a config document (parameters freshly
    /// initialized from the stored seeds).
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let fusion = FusionOperator::init(FusionConfig::from_kv(&doc.sub("fusion."))?)?;
        let glimpses: usize = doc.parse_key("glimpses")?;
        if glimpses == 0 {
            return Ok(VqaModel::new(fusion));
        }
        let scorer = FusionOperator::init(FusionConfig::from_kv(&doc.sub("attention."))?)?;
        check_dim("stored glimpse count", glimpses, scorer.config().d_out)?;
        VqaModel::with_attention(fusion, scorer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let pv = self.pack();
        let arrays: Vec<Array> = pv
            .manifest()
            .entries()
            .iter()
            .map(|e| Array::f64(e.name.clone(), e.shape.clone(), pv.values()[e.range()].to_vec()))
            .collect();
        format::write_bundle(path, &self.to_kv(), &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (doc, arrays) = format::read_bundle(path)?;
        let mut model = VqaModel::from_kv(&doc)?;
        let manifest = model.manifest();
        let mut values = vec![0.0; manifest.total()];
        for e in manifest.entries() {
            let a = format::find(&arrays, &e.name)?;
            if a.dims != e.shape {
                return Err(crate::error::FormatError::Record(format!(
                    "{}: stored shape {:?}, expected {:?}",
                    e.name, a.dims, e.shape
                ))
                .into());
            }
            values[e.range()].copy_from_slice(a.as_f64()?);
        }
        model.unpack_values(&values)?;
        Ok(model)
    }

    pub fn fusion_scheme(&self) -> Scheme {
        self.fusion.scheme()
    }
}

/// Softmax of the member-averaged pre-softmax scores.
pub fn ensemble_predict<'a>(models: &[VqaModel], q: &[f64], visual: impl Into<VisualRef<'a>>) -> Result<Vec<f64>> {
    let visual = visual.into();
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidConfig("ensemble needs at least one model".into()))?;
    let answers = first.answer_count();
    // running mean, so k identical members reproduce the single model exactly
    let mut mean = vec![0.0; answers];
    for (n, m) in models.iter().enumerate() {
        check_dim("ensemble answer count", answers, m.answer_count())?;
        let y = m.logits(q, visual)?;
        let w = 1.0 / (n + 1) as f64;
        for (acc, yi) in mean.iter_mut().zip(&y) {
            *acc += (yi - *acc) * w;
        }
    }
    Ok(softmax(&mean))
}
