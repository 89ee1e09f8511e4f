//! Planted-task learning experiments: structured versus identity cores,
//! and rank-constrained versus unconstrained cores.

use mutan_core::model::VqaModel;
use mutan_core::synthdata::SyntheticTask;
use mutan_core::train::{train_loop, TrainConfig, TrainReport};
use mutan_core::{FusionConfig, FusionOperator, Result, Scheme};
use rayon::prelude::*;

/// One model trained in a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub setting: usize,
    pub series: String,
    pub fusion: FusionConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub setting: usize,
    pub series: String,
    pub params: usize,
    pub best_epoch: usize,
    pub val_acc: f64,
}

impl SweepRow {
    pub const HEADER: &'static str = "setting\tseries\tparams\tbest_epoch\tval_acc";
}

/// Which hyper-parameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Vary {
    /// `t = t_q = t_v = t_o`: learnable Tucker core against the identity core.
    Projection,
    /// `t_o` at fixed `t_q = t_v`: Mutan at each rank against a dense core.
    OutputDim,
    /// Mutan rank at fixed `t`.
    Rank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub vary: Vary,
    pub values: Vec<usize>,
    /// Fixed projection size for `OutputDim` and `Rank` sweeps.
    pub t: usize,
    /// Ranks compared in an `OutputDim` sweep.
    pub ranks: Vec<usize>,
    pub use_tanh: bool,
    pub seed: u64,
}

impl SweepPlan {
    /// Every model of the sweep in output order.
    pub fn arms(&self, d_q: usize, d_v: usize, d_out: usize) -> Vec<Arm> {
        let base = |scheme| {
            FusionConfig::new(scheme, d_q, d_v, d_out)
                .with_tanh(self.use_tanh)
                .with_seed(self.seed)
        };
        let mut arms = Vec::new();
        for &x in &self.values {
            match self.vary {
                Vary::Projection => {
                    arms.push(Arm {
                        setting: x,
                        series: "tucker".into(),
                        fusion: base(Scheme::TuckerFusion).with_projections(x, x, x),
                    });
                    arms.push(Arm {
                        setting: x,
                        series: "identity".into(),
                        fusion: base(Scheme::Mlb).with_rank(x),
                    });
                }
                Vary::OutputDim => {
                    arms.push(Arm {
                        setting: x,
                        series: "tucker".into(),
                        fusion: base(Scheme::TuckerFusion).with_projections(self.t, self.t, x),
                    });
                    for &r in &self.ranks {
                        arms.push(Arm {
                            setting: x,
                            series: format!("mutan-r{r}"),
                            fusion: base(Scheme::Mutan).with_projections(self.t, self.t, x).with_rank(r),
                        });
                    }
                }
                Vary::Rank => arms.push(Arm {
                    setting: x,
                    series: "mutan".into(),
                    fusion: base(Scheme::Mutan).with_projections(self.t, self.t, self.t).with_rank(x),
                }),
            }
        }
        arms
    }
}

/// Trains one model on the task and reports its best validation accuracy.
pub fn train_arm(arm: &Arm, task: &SyntheticTask, train: &TrainConfig) -> Result<(SweepRow, TrainReport)> {
    let mut model = VqaModel::new(FusionOperator::init(arm.fusion.clone())?);
    task.check_model(&model)?;
    let report = train_loop(&mut model, &task.train, &task.val, train, |_| {})?;
    let row = SweepRow {
        setting: arm.setting,
        series: arm.series.clone(),
        params: arm.fusion.param_count(),
        best_epoch: report.state.best.epoch,
        val_acc: report.state.best.val_accuracy,
    };
    Ok((row, report))
}

/// Runs every arm. Arms are independent, so with `parallel` they train
/// concurrently; rows come back in plan order either way.
pub fn run_sweep(
    plan: &SweepPlan,
    task: &SyntheticTask,
    train: &TrainConfig,
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    plan.validate()?;
    let c = &task.config;
    let arms = plan.arms(c.d_q, c.d_v, c.n_answers);
    let run = |arm: &Arm| train_arm(arm, task, train).map(|(row, _)| row);
    if parallel {
        arms.par_iter().map(run).collect()
    } else {
        arms.iter().map(run).collect()
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(mutan_core::Error::InvalidConfig("sweep range is empty".into()));
        }
        if self.vary == Vary::OutputDim && self.ranks.is_empty() {
            return Err(mutan_core::Error::InvalidConfig("output-dim sweep needs at least one rank".into()));
        }
        Ok(())
    }
}
