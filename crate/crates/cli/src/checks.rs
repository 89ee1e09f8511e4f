//! Identity and gradient suites run by `mutan check`.

use std::fmt;
use std::str::FromStr;

use mutan_core::attention::{self, RegionGrid};
use mutan_core::fusion::full_bilinear_forward;
use mutan_core::gradcheck::{check_fusion, check_model};
use mutan_core::model::{Visual, VqaModel};
use mutan_core::sketch::{sketch_outer, sketch_outer_direct, CountSketchPlan};
use mutan_core::tensor::axpy;
use mutan_core::fusion::FusionParams;
use mutan_core::{FusionConfig, FusionOperator, Result, Scheme};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const EQUIV_TOLERANCE: f64 = 1e-10;
pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const GRAD_STEP: f64 = 1e-5;
pub const SKETCH_TOLERANCE: f64 = 1e-9;
pub const LINEARITY_TOLERANCE: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Equiv,
    Grad,
    Sketch,
    AblateLinearity,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Equiv, Suite::Grad, Suite::Sketch, Suite::AblateLinearity];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Equiv => "equiv",
            Suite::Grad => "grad",
            Suite::Sketch => "sketch",
            Suite::AblateLinearity => "ablate-linearity",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}` (expected equiv, grad, sketch or ablate-linearity)"))
    }
}

/// One measured check: an error statistic against its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub suite: Suite,
    pub check: String,
    pub seed: u64,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub const HEADER: &'static str = "suite\tcheck\tseed\terror\ttolerance\tstatus";

    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tolerance
    }
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{:.16e}\t{:.1e}\t{}",
            self.suite,
            self.check,
            self.seed,
            self.error,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckOptions {
    /// Flip a sign in the Mutan backward pass.
    pub inject_fault: bool,
    pub parallel: bool,
}

/// `max |a − b| / max |b|`, the reference being `b`.
pub fn max_relative(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Desk-sized operator with every scheme-specific field set.
pub fn desk_config(scheme: Scheme, seed: u64, use_tanh: bool) -> FusionConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (d_q, d_v, d_out) = (dim(2, 6), dim(2, 6), dim(2, 6));
    let (t_q, t_v, t_o) = (dim(2, 5), dim(2, 5), dim(2, 5));
    let rank = dim(1, t_q.min(t_v));
    let sketch_dim = dim(3, 6);
    FusionConfig::new(scheme, d_q, d_v, d_out)
        .with_projections(t_q, t_v, t_o)
        .with_rank(rank)
        .with_sketch_dim(sketch_dim)
        .with_tanh(use_tanh)
        .with_seed(seed)
}

fn equiv_row(scheme: Scheme, seed: u64) -> Result<CheckRow> {
    let op = FusionOperator::init(desk_config(scheme, seed, false))?;
    let cfg = op.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, v) = (uniform(&mut rng, cfg.d_q), uniform(&mut rng, cfg.d_v));
    let y = op.forward(&q, &v)?.0;
    let reference = match op.params() {
        // Concat is linear, not bilinear: compare with its block form W_q q + W_v v
        FusionParams::Concat { w } => (0..cfg.d_out)
            .map(|k| {
                let row = w.row(k);
                let (wq, wv) = row.split_at(cfg.d_q);
                wq.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() + wv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect(),
        _ => full_bilinear_forward(&op.effective_tucker()?.reconstruct()?, &q, &v)?,
    };
    Ok(CheckRow {
        suite: Suite::Equiv,
        check: format!("{scheme}"),
        seed,
        error: max_relative(&y, &reference),
        tolerance: EQUIV_TOLERANCE,
    })
}

fn grad_row(scheme: Scheme, seed: u64, inject_fault: bool) -> Result<CheckRow> {
    let mut op = FusionOperator::init(desk_config(scheme, seed, true))?;
    if inject_fault {
        op.inject_backward_fault();
    }
    let cfg = op.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, v, dy) = (
        uniform(&mut rng, cfg.d_q),
        uniform(&mut rng, cfg.d_v),
        uniform(&mut rng, cfg.d_out),
    );
    let rep = check_fusion(&op, &q, &v, &dy, GRAD_STEP)?;
    Ok(CheckRow {
        suite: Suite::Grad,
        check: format!("{scheme}"),
        seed,
        error: rep.max_rel_error,
        tolerance: GRAD_TOLERANCE,
    })
}

/// Small attention model: Mutan scorer with `g` glimpses, Mutan answer fusion.
pub fn desk_attention_model(seed: u64, glimpses: usize, inject_fault: bool) -> Result<VqaModel> {
    let (d_q, d_v, answers) = (4, 3, 3);
    let mut scorer = FusionOperator::init(
        FusionConfig::new(Scheme::Mutan, d_q, d_v, glimpses)
            .with_projections(3, 3, 2)
            .with_rank(2)
            .with_seed(seed),
    )?;
    let mut fusion = FusionOperator::init(
        FusionConfig::new(Scheme::Mutan, d_q, glimpses * d_v, answers)
            .with_projections(3, 3, 3)
            .with_rank(2)
            .with_seed(seed + 1),
    )?;
    if inject_fault {
        scorer.inject_backward_fault();
        fusion.inject_backward_fault();
    }
    VqaModel::with_attention(fusion, scorer)
}

fn attention_grad_row(seed: u64, inject_fault: bool) -> Result<CheckRow> {
    let model = desk_attention_model(seed, 2, inject_fault)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, model.region_dim())).collect();
    let visual = Visual::Grid(RegionGrid::from_rows(&rows)?);
    let q = uniform(&mut rng, model.d_q());
    let dy = uniform(&mut rng, model.answer_count());
    let rep = check_model(&model, &q, &visual, &dy, GRAD_STEP)?;
    Ok(CheckRow {
        suite: Suite::Grad,
        check: "attention-model".into(),
        seed,
        error: rep.max_rel_error,
        tolerance: GRAD_TOLERANCE,
    })
}

fn sketch_row(seed: u64) -> Result<CheckRow> {
    let (d, d_o) = (8, 16);
    let plan_q = CountSketchPlan::new(d, d_o, seed.wrapping_mul(2))?;
    let plan_v = CountSketchPlan::new(d, d_o, seed.wrapping_mul(2) + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, v) = (uniform(&mut rng, d), uniform(&mut rng, d));
    let direct = sketch_outer_direct(&plan_q, &plan_v, &q, &v)?;
    let fast = sketch_outer(&plan_q, &plan_v, &q, &v)?;
    Ok(CheckRow {
        suite: Suite::Sketch,
        check: "outer-product-sketch".into(),
        seed,
        error: max_relative(&fast, &direct),
        tolerance: SKETCH_TOLERANCE,
    })
}

fn linearity_rows(seed: u64) -> Result<Vec<CheckRow>> {
    let op = FusionOperator::init(desk_config(Scheme::Mutan, seed, true))?;
    let cfg = op.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, v) = (uniform(&mut rng, cfg.d_q), uniform(&mut rng, cfg.d_v));
    let (y, cache) = op.forward(&q, &v)?;
    let mut z = vec![0.0; cfg.t_o];
    for part in cache.z_parts() {
        axpy(1.0, part, &mut z);
    }
    let mut y_sum = vec![0.0; cfg.d_out];
    for y_r in op.rank_outputs(&q, &v)? {
        axpy(1.0, &y_r, &mut y_sum);
    }

    let model = desk_attention_model(seed, 2, false)?;
    let scorer = &model.attention().expect("attention model").scorer;
    let rows: Vec<Vec<f64>> = (0..5).map(|_| uniform(&mut rng, model.region_dim())).collect();
    let grid = RegionGrid::from_rows(&rows)?;
    let q_att = uniform(&mut rng, model.d_q());
    let full = attention::scores(scorer, &grid, &q_att, None)?;
    let mut summed = vec![0.0; full.data().len()];
    for r in 0..scorer.config().rank {
        axpy(1.0, attention::scores(scorer, &grid, &q_att, Some(r))?.data(), &mut summed);
    }

    let row = |check: &str, error| CheckRow {
        suite: Suite::AblateLinearity,
        check: check.into(),
        seed,
        error,
        tolerance: LINEARITY_TOLERANCE,
    };
    Ok(vec![
        row("z-rank-sum", max_relative(&z, cache.z())),
        row("y-rank-sum", max_relative(&y_sum, &y)),
        row("attention-score-rank-sum", max_relative(&summed, full.data())),
    ])
}

type Job = Box<dyn Fn() -> Result<Vec<CheckRow>> + Send + Sync>;

fn jobs(suite: Suite, opts: CheckOptions) -> Vec<Job> {
    let mut jobs: Vec<Job> = Vec::new();
    match suite {
        Suite::Equiv => {
            for scheme in Scheme::ALL {
                for seed in 0..3 {
                    jobs.push(Box::new(move || Ok(vec![equiv_row(scheme, seed)?])));
                }
            }
        }
        Suite::Grad => {
            let fault = opts.inject_fault;
            for scheme in Scheme::ALL {
                for seed in 0..3 {
                    jobs.push(Box::new(move || Ok(vec![grad_row(scheme, seed, fault)?])));
                }
            }
            for seed in 0..3 {
                jobs.push(Box::new(move || Ok(vec![attention_grad_row(seed, fault)?])));
            }
        }
        Suite::Sketch => {
            for seed in 0..100 {
                jobs.push(Box::new(move || Ok(vec![sketch_row(seed)?])));
            }
        }
        Suite::AblateLinearity => {
            for seed in 0..5 {
                jobs.push(Box::new(move || linearity_rows(seed)));
            }
        }
    }
    jobs
}

/// Runs a suite; rows are returned in a fixed order regardless of `parallel`.
pub fn run_suite(suite: Suite, opts: CheckOptions) -> Result<Vec<CheckRow>> {
    let jobs = jobs(suite, opts);
    let chunks: Vec<Vec<CheckRow>> = if opts.parallel {
        jobs.par_iter().map(|j| j()).collect::<Result<_>>()?
    } else {
        jobs.iter().map(|j| j()).collect::<Result<_>>()?
    };
    Ok(chunks.into_iter().flatten().collect())
}
