use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mutan_core::synthdata::Planted;
use mutan_core::Scheme;

use crate::checks::Suite;

#[derive(Debug, Parser)]
#[command(name = "mutan", version, about = "Tucker fusion audits, identity checks and planted-task experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count learnable fusion parameters.
    Params(ParamsArgs),
    /// Run an identity or gradient suite.
    Check(CheckArgs),
    /// Train one model on a task file.
    Train(TrainArgs),
    /// Train a family of models while varying one dimension.
    Sweep(SweepArgs),
    /// Per-rank ablation of a trained Mutan checkpoint.
    Ablate(AblateArgs),
    /// Generate a planted synthetic task.
    Gen(GenArgs),
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse::<Scheme>().map_err(|e| e.to_string())
}

fn parse_planted(s: &str) -> Result<Planted, String> {
    s.parse::<Planted>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Print the five published configurations.
    #[arg(long, conflicts_with = "scheme")]
    pub table1: bool,
    #[arg(long, value_parser = parse_scheme, required_unless_present = "table1")]
    pub scheme: Option<Scheme>,
    #[arg(long, default_value_t = 2400)]
    pub dq: usize,
    #[arg(long, default_value_t = 2048)]
    pub dv: usize,
    #[arg(long, default_value_t = 2000)]
    pub answers: usize,
    /// Projection size used for t_q, t_v and t_o.
    #[arg(long, default_value_t = 360)]
    pub t: usize,
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    #[arg(long, default_value_t = 16000)]
    pub sketch_dim: usize,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, value_parser = |s: &str| s.parse::<Suite>())]
    pub suite: Suite,
    /// Flip the sign of one Mutan backward term.
    #[arg(long)]
    pub inject_fault: bool,
    /// Worker threads; results are aggregated in a fixed order.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

/// Model and optimizer flags shared by `train` and `sweep`.
#[derive(Debug, Args, Clone)]
pub struct TrainingFlags {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Mini-batch size; defaults to 512, or 100 with attention.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, env = "MUTAN_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Use linear projections instead of tanh.
    #[arg(long)]
    pub no_tanh: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, value_parser = parse_scheme, default_value = "mutan")]
    pub scheme: Scheme,
    /// Projection size (t_q = t_v, and t_o unless --t-o is given).
    #[arg(long, default_value_t = 3)]
    pub t: usize,
    #[arg(long)]
    pub t_o: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    #[arg(long, default_value_t = 16)]
    pub sketch_dim: usize,
    /// Attention glimpses; 0 trains a model without attention.
    #[arg(long, default_value_t = 0)]
    pub glimpses: usize,
    #[command(flatten)]
    pub training: TrainingFlags,
    /// Checkpoint manifest path (the blob is written next to it).
    #[arg(long)]
    pub out: PathBuf,
    /// Print 0 in the wall_ms column so logs can be diffed.
    #[arg(long)]
    pub no_wall_clock: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VaryArg {
    T,
    To,
    Rank,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, value_enum)]
    pub vary: VaryArg,
    /// Inclusive range `start:end:step`.
    #[arg(long)]
    pub range: String,
    /// Fixed projection size for `to` and `rank` sweeps.
    #[arg(long, default_value_t = 6)]
    pub t: usize,
    /// Mutan ranks compared against the dense core in a `to` sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2])]
    pub ranks: Vec<usize>,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    /// Directory for per-rank attention map CSVs (attention models only).
    #[arg(long)]
    pub maps_dir: Option<PathBuf>,
    /// Validation examples whose attention maps are exported.
    #[arg(long, default_value_t = 3)]
    pub map_examples: usize,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 8)]
    pub dq: usize,
    #[arg(long, default_value_t = 8)]
    pub dv: usize,
    #[arg(long, default_value_t = 4)]
    pub answers: usize,
    /// Training examples.
    #[arg(long)]
    pub examples: usize,
    /// Validation examples; defaults to a quarter of --examples.
    #[arg(long)]
    pub val_examples: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, env = "MUTAN_SEED", default_value_t = 0)]
    pub seed: u64,
    /// `dense` or `tucker:t_q,t_v,t_o,rank`.
    #[arg(long, value_parser = parse_planted, default_value = "tucker:3,3,3,2")]
    pub planted: Planted,
    /// Regions per grid; 0 writes plain visual vectors.
    #[arg(long, default_value_t = 0)]
    pub regions: usize,
    #[arg(long, default_value_t = 0.1)]
    pub region_noise: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Read the file back and score the planted predictor.
    #[arg(long)]
    pub verify: bool,
}
