//! Bilinear fusion operators `(q, v) → y`.
//!
//! Every operator in the Tucker family computes
//!
//! ```text
//! q̃ = act(qᵀ Wq)      ṽ = act(vᵀ Wv)
//! z = (Tc ×₁ q̃) ×₂ ṽ   y = Wo z
//! ```
//!
//! and differs only in how the core `Tc` and the factors are constrained:
//! a dense core ([`Scheme::TuckerFusion`]), slice-rank-`R` core stored as
//! `R` pairs `(M_r, N_r)` with `z = Σ_r (q̃ᵀ M_r) ∗ (ṽᵀ N_r)`
//! ([`Scheme::Mutan`]), the identity core ([`Scheme::Mlb`]), or fixed sign
//! diagonals with a hashing core ([`Scheme::Mcb`]). `act` is `tanh` when
//! enabled and the identity otherwise; with the identity every operator
//! is exactly the full bilinear map of its reconstructed tensor.

mod config;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{FusionConfig, Scheme};

use crate::error::{check_dim, Error, Result};
use crate::param::{Manifest, Packer, ParamVector, Unpacker};
use crate::sketch::{self, CountSketchPlan};
use crate::tensor::{axpy, dot, Matrix, Tensor3};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Learnable parameters of one operator (also used as a gradient buffer).
#[derive(Clone, Debug, PartialEq)]
pub enum FusionParams {
    Concat {
        w: Matrix,
    },
    FullBilinear {
        t: Tensor3,
    },
    Tucker {
        wq: Matrix,
        wv: Matrix,
        core: Tensor3,
        wo: Matrix,
    },
    Mutan {
        wq: Matrix,
        wv: Matrix,
        m: Vec<Matrix>,
        n: Vec<Matrix>,
        wo: Matrix,
    },
    Mlb {
        wq: Matrix,
        wv: Matrix,
        wo: Matrix,
    },
    Mcb {
        wo: Matrix,
    },
}

impl FusionParams {
    /// All-zero parameters shaped for `config` (which must be valid).
    pub fn zeros(config: &FusionConfig) -> Self {
        let (t_q, t_v, t_o) = config.latent_dims();
        let (d_q, d_v, d_out) = (config.d_q, config.d_v, config.d_out);
        match config.scheme {
            Scheme::Concat => FusionParams::Concat {
                w: Matrix::zeros(d_out, d_q + d_v),
            },
            Scheme::FullBilinear => FusionParams::FullBilinear {
                t: Tensor3::zeros([d_q, d_v, d_out]),
            },
            Scheme::TuckerFusion => FusionParams::Tucker {
                wq: Matrix::zeros(d_q, t_q),
                wv: Matrix::zeros(d_v, t_v),
                core: Tensor3::zeros([t_q, t_v, t_o]),
                wo: Matrix::zeros(d_out, t_o),
            },
            Scheme::Mutan => FusionParams::Mutan {
                wq: Matrix::zeros(d_q, t_q),
                wv: Matrix::zeros(d_v, t_v),
                m: (0..config.rank).map(|_| Matrix::zeros(t_q, t_o)).collect(),
                n: (0..config.rank).map(|_| Matrix::zeros(t_v, t_o)).collect(),
                wo: Matrix::zeros(d_out, t_o),
            },
            Scheme::Mlb => FusionParams::Mlb {
                wq: Matrix::zeros(d_q, t_q),
                wv: Matrix::zeros(d_v, t_v),
                wo: Matrix::zeros(d_out, t_o),
            },
            Scheme::Mcb => FusionParams::Mcb {
                wo: Matrix::zeros(d_out, t_o),
            },
        }
    }

    /// Flat buffers in manifest order.
    fn buffers(&self) -> Vec<&[f64]> {
        match self {
            FusionParams::Concat { w } => vec![w.data()],
            FusionParams::FullBilinear { t } => vec![t.data()],
            FusionParams::Tucker { wq, wv, core, wo } => {
                vec![wq.data(), wv.data(), core.data(), wo.data()]
            }
            FusionParams::Mutan { wq, wv, m, n, wo } => {
                let mut out = vec![wq.data(), wv.data()];
                out.extend(m.iter().map(Matrix::data));
                out.extend(n.iter().map(Matrix::data));
                out.push(wo.data());
                out
            }
            FusionParams::Mlb { wq, wv, wo } => vec![wq.data(), wv.data(), wo.data()],
            FusionParams::Mcb { wo } => vec![wo.data()],
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            FusionParams::Concat { w } => vec![w.data_mut()],
            FusionParams::FullBilinear { t } => vec![t.data_mut()],
            FusionParams::Tucker { wq, wv, core, wo } => {
                vec![wq.data_mut(), wv.data_mut(), core.data_mut(), wo.data_mut()]
            }
            FusionParams::Mutan { wq, wv, m, n, wo } => {
                let mut out = vec![wq.data_mut(), wv.data_mut()];
                out.extend(m.iter_mut().map(Matrix::data_mut));
                out.extend(n.iter_mut().map(Matrix::data_mut));
                out.push(wo.data_mut());
                out
            }
            FusionParams::Mlb { wq, wv, wo } => {
                vec![wq.data_mut(), wv.data_mut(), wo.data_mut()]
            }
            FusionParams::Mcb { wo } => vec![wo.data_mut()],
        }
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let m = |x: &Matrix| vec![x.rows(), x.cols()];
        match self {
            FusionParams::Concat { w } => vec![m(w)],
            FusionParams::FullBilinear { t } => vec![t.dims().to_vec()],
            FusionParams::Tucker { wq, wv, core, wo } => {
                vec![m(wq), m(wv), core.dims().to_vec(), m(wo)]
            }
            FusionParams::Mutan { wq, wv, m: ms, n, wo } => {
                let mut out = vec![m(wq), m(wv)];
                out.extend(ms.iter().map(m));
                out.extend(n.iter().map(m));
                out.push(m(wo));
                out
            }
            FusionParams::Mlb { wq, wv, wo } => vec![m(wq), m(wv), m(wo)],
            FusionParams::Mcb { wo } => vec![m(wo)],
        }
    }

    pub fn pack_into(&self, out: &mut [f64]) {
        let mut p = Packer::new(out);
        for b in self.buffers() {
            p.put(b);
        }
    }

    pub fn unpack_from(&mut self, src: &[f64]) {
        let mut u = Unpacker::new(src);
        for b in self.buffers_mut() {
            u.take(b);
        }
    }

    pub fn fill(&mut self, value: f64) {
        for b in self.buffers_mut() {
            b.iter_mut().for_each(|x| *x = value);
        }
    }

    pub fn len(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Slice-rank core `Tc[l, m, k] = Σ_r M_r[l, k] · N_r[m, k]`, i.e. every
/// mode-3 slice is a sum of `R` outer products `m_rᵏ ⊗ n_rᵏ`.
pub fn core_from_slices(m: &[Matrix], n: &[Matrix]) -> Result<Tensor3> {
    check_dim("core_from_slices: number of N_r", m.len(), n.len())?;
    let first_m = m
        .first()
        .ok_or_else(|| Error::InvalidConfig("core_from_slices needs at least one slice pair".into()))?;
    let first_n = &n[0];
    let (t_q, t_o, t_v) = (first_m.rows(), first_m.cols(), first_n.rows());
    for (mr, nr) in m.iter().zip(n) {
        check_dim("core_from_slices: M_r rows", t_q, mr.rows())?;
        check_dim("core_from_slices: M_r cols", t_o, mr.cols())?;
        check_dim("core_from_slices: N_r rows", t_v, nr.rows())?;
        check_dim("core_from_slices: N_r cols", t_o, nr.cols())?;
    }
    let mut core = Tensor3::zeros([t_q, t_v, t_o]);
    for l in 0..t_q {
        for j in 0..t_v {
            for k in 0..t_o {
                let s = m
                    .iter()
                    .zip(n)
                    .map(|(mr, nr)| mr.get(l, k) * nr.get(j, k))
                    .sum();
                core.set(l, j, k, s);
            }
        }
    }
    Ok(core)
}

/// The Tucker form `⟦Tc; Wq, Wv, Wo⟧` of an operator's bilinear tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TuckerForm {
    pub core: Tensor3,
    pub wq: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl TuckerForm {
    pub fn reconstruct(&self) -> Result<Tensor3> {
        crate::tensor::tucker_reconstruct(&self.core, &self.wq, &self.wv, &self.wo)
    }
}

/// Intermediate values of one forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct FusionCache {
    generation: u64,
    q: Vec<f64>,
    v: Vec<f64>,
    q_lat: Vec<f64>,
    v_lat: Vec<f64>,
    /// Mutan: `(q̃ᵀM_r, ṽᵀN_r)` per rank. Mcb: the two input sketches.
    parts: Vec<(Vec<f64>, Vec<f64>)>,
    /// Mutan: `z_r` per rank.
    z_parts: Vec<Vec<f64>>,
    z: Vec<f64>,
    keep: Option<usize>,
}

impl FusionCache {
    /// Latent pair representation `z` (empty for Concat and FullBilinear).
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// Per-rank contributions `z_r` (Mutan only).
    pub fn z_parts(&self) -> &[Vec<f64>] {
        &self.z_parts
    }

    /// Projected inputs `(q̃, ṽ)` after the optional tanh.
    pub fn projections(&self) -> (&[f64], &[f64]) {
        (&self.q_lat, &self.v_lat)
    }
}

/// Gradients of a scalar loss with respect to parameters and inputs.
#[derive(Clone, Debug)]
pub struct FusionGradients {
    pub params: ParamVector,
    pub d_q: Vec<f64>,
    pub d_v: Vec<f64>,
}

/// A fusion operator with its parameters.
#[derive(Clone, Debug)]
pub struct FusionOperator {
    config: FusionConfig,
    params: FusionParams,
    plans: Option<(CountSketchPlan, CountSketchPlan)>,
    generation: u64,
    fault: bool,
}

fn uniform_fill(rng: &mut ChaCha8Rng, fan_in: usize, buf: &mut [f64]) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for x in buf {
        *x = (2.0 * rng.random::<f64>() - 1.0) * bound;
    }
}

fn activate(pre: Vec<f64>, tanh: bool) -> Vec<f64> {
    if tanh {
        pre.into_iter().map(f64::tanh).collect()
    } else {
        pre
    }
}

/// Multiplies the upstream gradient by the tanh Jacobian `1 − x̃²` in place.
fn activation_backward(grad: &mut [f64], lat: &[f64], tanh: bool) {
    if tanh {
        for (g, x) in grad.iter_mut().zip(lat) {
            *g *= 1.0 - x * x;
        }
    }
}

impl FusionOperator {
    /// Builds an operator with parameters drawn i.i.d. uniform on
    /// `[−1/√fan_in, 1/√fan_in]` from a stream seeded by `config.seed`.
    pub fn init(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = FusionParams::zeros(&config);
        let (d_q, d_v) = (config.d_q, config.d_v);
        let mut plans = None;
        match &mut params {
            FusionParams::Concat { w } => uniform_fill(&mut rng, d_q + d_v, w.data_mut()),
            FusionParams::FullBilinear { t } => uniform_fill(&mut rng, d_q * d_v, t.data_mut()),
            FusionParams::Tucker { wq, wv, core, wo } => {
                let [t_q, t_v, t_o] = core.dims();
                uniform_fill(&mut rng, d_q, wq.data_mut());
                uniform_fill(&mut rng, d_v, wv.data_mut());
                uniform_fill(&mut rng, t_q * t_v, core.data_mut());
                uniform_fill(&mut rng, t_o, wo.data_mut());
            }
            FusionParams::Mutan { wq, wv, m, n, wo } => {
                uniform_fill(&mut rng, d_q, wq.data_mut());
                uniform_fill(&mut rng, d_v, wv.data_mut());
                for mr in m.iter_mut() {
                    uniform_fill(&mut rng, config.t_q, mr.data_mut());
                }
                for nr in n.iter_mut() {
                    uniform_fill(&mut rng, config.t_v, nr.data_mut());
                }
                uniform_fill(&mut rng, config.t_o, wo.data_mut());
            }
            FusionParams::Mlb { wq, wv, wo } => {
                uniform_fill(&mut rng, d_q, wq.data_mut());
                uniform_fill(&mut rng, d_v, wv.data_mut());
                uniform_fill(&mut rng, config.rank, wo.data_mut());
            }
            FusionParams::Mcb { wo } => {
                let seed_q = rng.random::<u64>();
                let seed_v = rng.random::<u64>();
                plans = Some((
                    CountSketchPlan::new(d_q, config.sketch_dim, seed_q)?,
                    CountSketchPlan::new(d_v, config.sketch_dim, seed_v)?,
                ));
                uniform_fill(&mut rng, config.sketch_dim, wo.data_mut());
            }
        }
        Ok(FusionOperator {
            config,
            params,
            plans,
            generation: next_generation(),
            fault: false,
        })
    }

    /// Builds an operator from explicit parameters. For MCB the sketch plans
    /// are regenerated from `config.seed` exactly as [`FusionOperator::init`]
    /// would draw them.
    pub fn from_params(config: FusionConfig, params: FusionParams) -> Result<Self> {
        let mut op = FusionOperator::init(config)?;
        op.set_params(params)?;
        Ok(op)
    }

    /// Replaces the MCB sketch plans. Both must map into `sketch_dim`.
    pub fn with_sketch_plans(mut self, plan_q: CountSketchPlan, plan_v: CountSketchPlan) -> Result<Self> {
        if self.config.scheme != Scheme::Mcb {
            return Err(Error::Unsupported("only MCB operators carry sketch plans".into()));
        }
        check_dim("MCB q plan input", self.config.d_q, plan_q.input_dim())?;
        check_dim("MCB v plan input", self.config.d_v, plan_v.input_dim())?;
        check_dim("MCB q plan output", self.config.sketch_dim, plan_q.output_dim())?;
        check_dim("MCB v plan output", self.config.sketch_dim, plan_v.output_dim())?;
        self.plans = Some((plan_q, plan_v));
        self.generation = next_generation();
        Ok(self)
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn scheme(&self) -> Scheme {
        self.config.scheme
    }

    pub fn params(&self) -> &FusionParams {
        &self.params
    }

    pub fn sketch_plans(&self) -> Option<(&CountSketchPlan, &CountSketchPlan)> {
        self.plans.as_ref().map(|(a, b)| (a, b))
    }

    pub fn set_params(&mut self, params: FusionParams) -> Result<()> {
        let expected: Vec<Vec<usize>> = self
            .manifest()
            .entries()
            .iter()
            .map(|e| e.shape.clone())
            .collect();
        if std::mem::discriminant(&params) != std::mem::discriminant(&self.params)
            || params.shapes() != expected
        {
            return Err(Error::InvalidConfig(format!(
                "parameter shapes do not match {} config {:?}",
                self.config.scheme, expected
            )));
        }
        if params.buffers().iter().any(|b| b.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("fusion parameters".into()));
        }
        self.params = params;
        self.generation = next_generation();
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        self.config.manifest()
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    pub fn pack(&self) -> ParamVector {
        let mut pv = ParamVector::zeros(self.manifest());
        self.params.pack_into(pv.values_mut());
        pv
    }

    pub fn unpack(&mut self, pv: &ParamVector) -> Result<()> {
        if *pv.manifest() != self.manifest() {
            return Err(Error::InvalidConfig(
                "parameter vector layout does not match operator".into(),
            ));
        }
        self.unpack_values(pv.values())
    }

    /// Loads parameters from a flat slice laid out as [`FusionOperator::manifest`].
    pub fn unpack_values(&mut self, values: &[f64]) -> Result<()> {
        check_dim("parameter vector length", self.param_count(), values.len())?;
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("fusion parameters".into()));
        }
        self.params.unpack_from(values);
        self.generation = next_generation();
        Ok(())
    }

    /// Flips the sign of one backward term. Exists so that gradient checks
    /// can demonstrate they catch a wrong formula.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self) {
        self.fault = true;
    }

    pub fn forward(&self, q: &[f64], v: &[f64]) -> Result<(Vec<f64>, FusionCache)> {
        self.forward_impl(q, v, None)
    }

    /// Mutan forward with every `z_r` except `z_keep` zeroed (`keep` is 0-based).
    pub fn forward_masked(&self, q: &[f64], v: &[f64], keep: usize) -> Result<(Vec<f64>, FusionCache)> {
        if self.config.scheme != Scheme::Mutan {
            return Err(Error::Unsupported(format!(
                "rank masking needs a mutan operator, got {}",
                self.config.scheme
            )));
        }
        if keep >= self.config.rank {
            return Err(Error::InvalidConfig(format!(
                "rank index {keep} out of range 0..{}",
                self.config.rank
            )));
        }
        self.forward_impl(q, v, Some(keep))
    }

    /// Pre-activation-free output of each rank alone: `Wo z_r` for every `r`.
    pub fn rank_outputs(&self, q: &[f64], v: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..self.config.rank)
            .map(|r| self.forward_masked(q, v, r).map(|(y, _)| y))
            .collect()
    }

    fn forward_impl(&self, q: &[f64], v: &[f64], keep: Option<usize>) -> Result<(Vec<f64>, FusionCache)> {
        check_dim("fusion input q", self.config.d_q, q.len())?;
        check_dim("fusion input v", self.config.d_v, v.len())?;
        let tanh = self.config.applies_tanh();
        let mut cache = FusionCache {
            generation: self.generation,
            q: q.to_vec(),
            v: v.to_vec(),
            q_lat: Vec::new(),
            v_lat: Vec::new(),
            parts: Vec::new(),
            z_parts: Vec::new(),
            z: Vec::new(),
            keep,
        };
        let y = match &self.params {
            FusionParams::Concat { w } => {
                let qv: Vec<f64> = q.iter().chain(v).copied().collect();
                w.matvec(&qv)?
            }
            FusionParams::FullBilinear { t } => bilinear_apply(t, q, v),
            FusionParams::Tucker { wq, wv, core, wo } => {
                cache.q_lat = activate(wq.vecmat(q)?, tanh);
                cache.v_lat = activate(wv.vecmat(v)?, tanh);
                cache.z = bilinear_apply(core, &cache.q_lat, &cache.v_lat);
                wo.matvec(&cache.z)?
            }
            FusionParams::Mutan { wq, wv, m, n, wo } => {
                cache.q_lat = activate(wq.vecmat(q)?, tanh);
                cache.v_lat = activate(wv.vecmat(v)?, tanh);
                let mut z = vec![0.0; self.config.t_o];
                for (r, (mr, nr)) in m.iter().zip(n).enumerate() {
                    let a = mr.vecmat(&cache.q_lat)?;
                    let b = nr.vecmat(&cache.v_lat)?;
                    let zr: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
                    if keep.is_none_or(|k| k == r) {
                        z.iter_mut().zip(&zr).for_each(|(acc, x)| *acc += x);
                    }
                    cache.parts.push((a, b));
                    cache.z_parts.push(zr);
                }
                cache.z = z;
                wo.matvec(&cache.z)?
            }
            FusionParams::Mlb { wq, wv, wo } => {
                cache.q_lat = activate(wq.vecmat(q)?, tanh);
                cache.v_lat = activate(wv.vecmat(v)?, tanh);
                cache.z = cache
                    .q_lat
                    .iter()
                    .zip(&cache.v_lat)
                    .map(|(a, b)| a * b)
                    .collect();
                wo.matvec(&cache.z)?
            }
            FusionParams::Mcb { wo } => {
                let (plan_q, plan_v) = self.plans.as_ref().expect("MCB operator without plans");
                let sq = plan_q.sketch(q)?;
                let sv = plan_v.sketch(v)?;
                cache.z = sketch::circular_convolution(&sq, &sv)?;
                cache.parts.push((sq, sv));
                wo.matvec(&cache.z)?
            }
        };
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{} forward", self.config.scheme)));
        }
        Ok((y, cache))
    }

    pub fn zero_grads(&self) -> FusionParams {
        FusionParams::zeros(&self.config)
    }

    /// Backward pass returning a packed gradient plus input gradients.
    pub fn backward(&self, cache: &FusionCache, d_y: &[f64]) -> Result<FusionGradients> {
        let mut grads = self.zero_grads();
        let (d_q, d_v) = self.backward_into(cache, d_y, &mut grads)?;
        let mut params = ParamVector::zeros(self.manifest());
        grads.pack_into(params.values_mut());
        Ok(FusionGradients { params, d_q, d_v })
    }

    /// Accumulates parameter gradients into `grads` and returns `(∂L/∂q, ∂L/∂v)`.
    pub fn backward_into(
        &self,
        cache: &FusionCache,
        d_y: &[f64],
        grads: &mut FusionParams,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache(format!(
                "cache generation {} vs operator generation {}",
                cache.generation, self.generation
            )));
        }
        check_dim("upstream gradient", self.config.d_out, d_y.len())?;
        if std::mem::discriminant(grads) != std::mem::discriminant(&self.params)
            || grads.shapes() != self.params.shapes()
        {
            return Err(Error::InvalidConfig("gradient buffer layout mismatch".into()));
        }
        let tanh = self.config.applies_tanh();
        let (q, v) = (&cache.q, &cache.v);
        let flip = if self.fault { -1.0 } else { 1.0 };
        let out = match (&self.params, grads) {
            (FusionParams::Concat { w }, FusionParams::Concat { w: gw }) => {
                let qv: Vec<f64> = q.iter().chain(v).copied().collect();
                gw.add_outer(1.0, d_y, &qv);
                let d_qv = w.vecmat(d_y)?;
                let (a, b) = d_qv.split_at(self.config.d_q);
                (a.to_vec(), b.to_vec())
            }
            (FusionParams::FullBilinear { t }, FusionParams::FullBilinear { t: gt }) => {
                bilinear_backward(t, q, v, d_y, gt)
            }
            (
                FusionParams::Tucker { wq, wv, core, wo },
                FusionParams::Tucker {
                    wq: gwq,
                    wv: gwv,
                    core: gcore,
                    wo: gwo,
                },
            ) => {
                gwo.add_outer(1.0, d_y, &cache.z);
                let dz = wo.vecmat(d_y)?;
                let (mut dql, mut dvl) = bilinear_backward(core, &cache.q_lat, &cache.v_lat, &dz, gcore);
                activation_backward(&mut dql, &cache.q_lat, tanh);
                activation_backward(&mut dvl, &cache.v_lat, tanh);
                gwq.add_outer(1.0, q, &dql);
                gwv.add_outer(1.0, v, &dvl);
                (wq.matvec(&dql)?, wv.matvec(&dvl)?)
            }
            (
                FusionParams::Mutan { wq, wv, m, n, wo },
                FusionParams::Mutan {
                    wq: gwq,
                    wv: gwv,
                    m: gm,
                    n: gn,
                    wo: gwo,
                },
            ) => {
                gwo.add_outer(1.0, d_y, &cache.z);
                let dz = wo.vecmat(d_y)?;
                let mut dql = vec![0.0; self.config.t_q];
                let mut dvl = vec![0.0; self.config.t_v];
                for (r, (a, b)) in cache.parts.iter().enumerate() {
                    if cache.keep.is_some_and(|k| k != r) {
                        continue;
                    }
                    let da: Vec<f64> = dz.iter().zip(b).map(|(g, x)| g * x).collect();
                    let db: Vec<f64> = dz.iter().zip(a).map(|(g, x)| g * x).collect();
                    gm[r].add_outer(flip, &cache.q_lat, &da);
                    gn[r].add_outer(1.0, &cache.v_lat, &db);
                    axpy(1.0, &m[r].matvec(&da)?, &mut dql);
                    axpy(1.0, &n[r].matvec(&db)?, &mut dvl);
                }
                activation_backward(&mut dql, &cache.q_lat, tanh);
                activation_backward(&mut dvl, &cache.v_lat, tanh);
                gwq.add_outer(1.0, q, &dql);
                gwv.add_outer(1.0, v, &dvl);
                (wq.matvec(&dql)?, wv.matvec(&dvl)?)
            }
            (
                FusionParams::Mlb { wq, wv, wo },
                FusionParams::Mlb {
                    wq: gwq,
                    wv: gwv,
                    wo: gwo,
                },
            ) => {
                gwo.add_outer(1.0, d_y, &cache.z);
                let dz = wo.vecmat(d_y)?;
                let mut dql: Vec<f64> = dz.iter().zip(&cache.v_lat).map(|(g, x)| g * x).collect();
                let mut dvl: Vec<f64> = dz.iter().zip(&cache.q_lat).map(|(g, x)| g * x).collect();
                activation_backward(&mut dql, &cache.q_lat, tanh);
                activation_backward(&mut dvl, &cache.v_lat, tanh);
                gwq.add_outer(1.0, q, &dql);
                gwv.add_outer(1.0, v, &dvl);
                (wq.matvec(&dql)?, wv.matvec(&dvl)?)
            }
            (FusionParams::Mcb { wo }, FusionParams::Mcb { wo: gwo }) => {
                let (plan_q, plan_v) = self.plans.as_ref().expect("MCB operator without plans");
                let (sq, sv) = &cache.parts[0];
                gwo.add_outer(1.0, d_y, &cache.z);
                let dz = wo.vecmat(d_y)?;
                let dsq = sketch::circular_correlation(&dz, sv)?;
                let dsv = sketch::circular_correlation(&dz, sq)?;
                (plan_q.sketch_adjoint(&dsq)?, plan_v.sketch_adjoint(&dsv)?)
            }
            _ => unreachable!("gradient layout checked above"),
        };
        Ok(out)
    }

    /// Tucker form of the operator's bilinear tensor. Only defined when the
    /// projections are linear (no tanh); Concat has no such form.
    pub fn effective_tucker(&self) -> Result<TuckerForm> {
        if self.config.applies_tanh() {
            return Err(Error::Unsupported(
                "tanh projections are not multilinear; disable use_tanh".into(),
            ));
        }
        let form = match &self.params {
            FusionParams::Concat { .. } => {
                return Err(Error::Unsupported("concat is not a bilinear operator".into()))
            }
            FusionParams::FullBilinear { t } => TuckerForm {
                core: t.clone(),
                wq: Matrix::identity(self.config.d_q),
                wv: Matrix::identity(self.config.d_v),
                wo: Matrix::identity(self.config.d_out),
            },
            FusionParams::Tucker { wq, wv, core, wo } => TuckerForm {
                core: core.clone(),
                wq: wq.clone(),
                wv: wv.clone(),
                wo: wo.clone(),
            },
            FusionParams::Mutan { wq, wv, m, n, wo } => TuckerForm {
                core: core_from_slices(m, n)?,
                wq: wq.clone(),
                wv: wv.clone(),
                wo: wo.clone(),
            },
            FusionParams::Mlb { wq, wv, wo } => TuckerForm {
                core: Tensor3::identity(self.config.rank),
                wq: wq.clone(),
                wv: wv.clone(),
                wo: wo.clone(),
            },
            FusionParams::Mcb { wo } => {
                let (plan_q, plan_v) = self.plans.as_ref().expect("MCB operator without plans");
                TuckerForm {
                    core: sketch::hash_core(plan_q, plan_v)?,
                    wq: sketch::sign_factor(plan_q),
                    wv: sketch::sign_factor(plan_v),
                    wo: wo.clone(),
                }
            }
        };
        Ok(form)
    }
}

/// `y[k] = Σ_{i,j} a[i] b[j] T[i, j, k]`, streaming mode-3 fibres.
fn bilinear_apply(t: &Tensor3, a: &[f64], b: &[f64]) -> Vec<f64> {
    let [d1, d2, d3] = t.dims();
    let data = t.data();
    let mut out = vec![0.0; d3];
    for (i, &ai) in a.iter().enumerate().take(d1) {
        for (j, &bj) in b.iter().enumerate().take(d2) {
            let off = (i * d2 + j) * d3;
            axpy(ai * bj, &data[off..off + d3], &mut out);
        }
    }
    out
}

/// Gradients of `bilinear_apply` given upstream `g`; accumulates `∂T` into `gt`.
fn bilinear_backward(t: &Tensor3, a: &[f64], b: &[f64], g: &[f64], gt: &mut Tensor3) -> (Vec<f64>, Vec<f64>) {
    let [d1, d2, d3] = t.dims();
    let data = t.data();
    let mut da = vec![0.0; d1];
    let mut db = vec![0.0; d2];
    let gdata = gt.data_mut();
    for i in 0..d1 {
        for j in 0..d2 {
            let off = (i * d2 + j) * d3;
            let fibre = &data[off..off + d3];
            let s = dot(fibre, g);
            da[i] += b[j] * s;
            db[j] += a[i] * s;
            axpy(a[i] * b[j], g, &mut gdata[off..off + d3]);
        }
    }
    (da, db)
}

/// Reference full bilinear map `y = (T ×₁ q) ×₂ v` through mode products.
pub fn full_bilinear_forward(t: &Tensor3, q: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    t.bilinear(q, v)
}

#[cfg(test)]
mod tests;
