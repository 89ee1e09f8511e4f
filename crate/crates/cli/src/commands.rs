use std::fs;
use std::io::Write;
use std::path::Path;

use mutan_core::attention::{attend, attention_ablation_maps};
use mutan_core::format::{fmt_f64, KvDoc};
use mutan_core::model::{Visual, VqaModel};
use mutan_core::synthdata::{generate, read_dataset, write_dataset, Planted, SynthConfig, SyntheticTask};
use mutan_core::tensor::{argmax, axpy};
use mutan_core::train::{evaluate, train_loop, vqa_accuracy, EpochRecord, TrainConfig};
use mutan_core::{Error, FusionConfig, FusionOperator, Scheme};

use crate::args::{AblateArgs, CheckArgs, Cli, Command, GenArgs, ParamsArgs, SweepArgs, TrainArgs, TrainingFlags, VaryArg};
use crate::checks::{max_relative, run_suite, CheckOptions, CheckRow, LINEARITY_TOLERANCE};
use crate::experiments::{run_sweep, SweepPlan, SweepRow, Vary};
use crate::params;
use crate::{CliError, Outcome};

type CmdResult = Result<Outcome, CliError>;

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::Io(format!("writing output: {e}")))
}

/// Echoes the resolved configuration as `# key=value` lines.
fn echo(out: &mut dyn Write, command: &str, doc: &KvDoc) -> Result<(), CliError> {
    emit(out, format!("# command={command}"))?;
    for (k, v) in doc.pairs() {
        emit(out, format!("# {k}={v}"))?;
    }
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    match &cli.command {
        Command::Params(a) => cmd_params(a, out),
        Command::Check(a) => cmd_check(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::Gen(a) => cmd_gen(a, out),
    }
}

fn cmd_params(a: &ParamsArgs, out: &mut dyn Write) -> CmdResult {
    if a.table1 {
        let mut doc = KvDoc::new();
        doc.set("preset", "table1");
        doc.set("d_q", params::TABLE1_DQ);
        doc.set("d_v", params::TABLE1_DV);
        doc.set("answers", params::TABLE1_ANSWERS);
        echo(out, "params", &doc)?;
        params::write_table1(out).map_err(|e| CliError::Io(e.to_string()))?;
        return Ok(Outcome::Success);
    }
    let scheme = a.scheme.ok_or_else(|| CliError::Usage("--scheme or --table1 is required".into()))?;
    let config = FusionConfig::new(scheme, a.dq, a.dv, a.answers)
        .with_projections(a.t, a.t, a.t)
        .with_rank(a.rank)
        .with_sketch_dim(a.sketch_dim);
    echo(out, "params", &config.to_kv())?;
    params::write_single(out, &config)?;
    Ok(Outcome::Success)
}

fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>, CliError> {
    match threads {
        0 => Err(CliError::Usage("--threads must be at least 1".into())),
        1 => Ok(None),
        n => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}"))),
    }
}

fn cmd_check(a: &CheckArgs, out: &mut dyn Write) -> CmdResult {
    let mut doc = KvDoc::new();
    doc.set("suite", a.suite);
    doc.set("inject_fault", a.inject_fault);
    doc.set("threads", a.threads);
    echo(out, "check", &doc)?;
    let pool = thread_pool(a.threads)?;
    let opts = CheckOptions {
        inject_fault: a.inject_fault,
        parallel: pool.is_some(),
    };
    let rows = match &pool {
        Some(p) => p.install(|| run_suite(a.suite, opts))?,
        None => run_suite(a.suite, opts)?,
    };
    emit(out, CheckRow::HEADER)?;
    for row in &rows {
        emit(out, row.to_string())?;
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    emit(out, format!("# checks={} failed={failed}", rows.len()))?;
    Ok(if failed == 0 { Outcome::Success } else { Outcome::ToleranceBreach })
}

fn train_config(t: &TrainingFlags, attention: bool) -> TrainConfig {
    TrainConfig {
        learning_rate: t.lr,
        batch_size: t.batch.unwrap_or(if attention {
            TrainConfig::ATTENTION_BATCH
        } else {
            TrainConfig::default().batch_size
        }),
        max_epochs: t.epochs,
        seed: t.seed,
        ..TrainConfig::default()
    }
}

fn train_config_kv(cfg: &TrainConfig) -> KvDoc {
    let mut doc = KvDoc::new();
    doc.set("epochs", cfg.max_epochs);
    doc.set("lr", fmt_f64(cfg.learning_rate));
    doc.set("beta1", fmt_f64(cfg.beta1));
    doc.set("beta2", fmt_f64(cfg.beta2));
    doc.set("epsilon", fmt_f64(cfg.epsilon));
    doc.set("batch", cfg.batch_size);
    doc.set("seed", cfg.seed);
    doc
}

/// Model for `task` with the requested fusion; with glimpses the scorer
/// uses the same scheme and the answer fusion reads `g · d_v` features.
pub fn build_model(a: &TrainArgs, task: &SyntheticTask) -> mutan_core::Result<VqaModel> {
    let c = &task.config;
    let t_o = a.t_o.unwrap_or(a.t);
    let seed = a.training.seed;
    let config = |d_v: usize, d_out: usize, seed: u64| {
        FusionConfig::new(a.scheme, c.d_q, d_v, d_out)
            .with_projections(a.t, a.t, t_o)
            .with_rank(a.rank)
            .with_sketch_dim(a.sketch_dim)
            .with_tanh(!a.training.no_tanh)
            .with_seed(seed)
    };
    if a.glimpses == 0 {
        return Ok(VqaModel::new(FusionOperator::init(config(c.d_v, c.n_answers, seed))?));
    }
    let scorer = FusionOperator::init(config(c.d_v, a.glimpses, seed))?;
    let fusion = FusionOperator::init(config(a.glimpses * c.d_v, c.n_answers, seed.wrapping_add(1)))?;
    VqaModel::with_attention(fusion, scorer)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let task = read_dataset(&a.task)?;
    let mut model = build_model(a, &task)?;
    task.check_model(&model)?;
    let cfg = train_config(&a.training, a.glimpses > 0);
    let mut doc = KvDoc::new();
    doc.set("task", a.task.display());
    doc.set("out", a.out.display());
    doc.extend_prefixed("", &model.to_kv());
    doc.extend_prefixed("train.", &train_config_kv(&cfg));
    echo(out, "train", &doc)?;
    emit(out, EpochRecord::HEADER)?;
    let mut write_err = None;
    let report = train_loop(&mut model, &task.train, &task.val, &cfg, |rec| {
        let rec = if a.no_wall_clock { rec.without_timing() } else { *rec };
        if let Err(e) = writeln!(out, "{rec}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::Io(format!("writing output: {e}")));
    }
    model.save(&a.out)?;
    emit(
        out,
        format!(
            "# best_epoch={} best_val_acc={}",
            report.state.best.epoch,
            fmt_f64(report.state.best.val_accuracy)
        ),
    )?;
    Ok(Outcome::Success)
}

/// Parses an inclusive `start:end:step` range.
pub fn parse_range(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Usage(format!("range `{s}` is not start:end:step"));
    let parts: Vec<usize> = s
        .split(':')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let (start, end, step) = match parts[..] {
        [start, end] => (start, end, 1),
        [start, end, step] => (start, end, step),
        _ => return Err(bad()),
    };
    if step == 0 {
        return Err(CliError::Usage("range step must be positive".into()));
    }
    let values: Vec<usize> = (start..=end).step_by(step).collect();
    if values.is_empty() {
        return Err(CliError::Usage(format!("range `{s}` is empty")));
    }
    Ok(values)
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> CmdResult {
    let values = parse_range(&a.range)?;
    let task = read_dataset(&a.task)?;
    if task.config.regions > 0 {
        return Err(CliError::Usage("sweeps run on vector tasks (generated with --regions 0)".into()));
    }
    let plan = SweepPlan {
        vary: match a.vary {
            VaryArg::T => Vary::Projection,
            VaryArg::To => Vary::OutputDim,
            VaryArg::Rank => Vary::Rank,
        },
        values,
        t: a.t,
        ranks: a.ranks.clone(),
        use_tanh: !a.training.no_tanh,
        seed: a.training.seed,
    };
    let cfg = train_config(&a.training, false);
    let mut doc = KvDoc::new();
    doc.set("task", a.task.display());
    doc.set("vary", format!("{:?}", a.vary).to_lowercase());
    doc.set("range", &a.range);
    doc.set("t", a.t);
    doc.set(
        "ranks",
        a.ranks.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
    );
    doc.set("use_tanh", plan.use_tanh);
    doc.set("threads", a.threads);
    doc.extend_prefixed("train.", &train_config_kv(&cfg));
    echo(out, "sweep", &doc)?;
    let pool = thread_pool(a.threads)?;
    let rows = match &pool {
        Some(p) => p.install(|| run_sweep(&plan, &task, &cfg, true))?,
        None => run_sweep(&plan, &task, &cfg, false)?,
    };
    emit(out, SweepRow::HEADER)?;
    for r in rows {
        emit(
            out,
            format!("{}\t{}\t{}\t{}\t{}", r.setting, r.series, r.params, r.best_epoch, fmt_f64(r.val_acc)),
        )?;
    }
    Ok(Outcome::Success)
}

fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> CmdResult {
    let model = VqaModel::load(&a.checkpoint)?;
    let task = read_dataset(&a.task)?;
    task.check_model(&model)?;
    if model.fusion_scheme() != Scheme::Mutan {
        return Err(CliError::Usage(format!(
            "rank ablation needs a mutan checkpoint, got {}",
            model.fusion_scheme()
        )));
    }
    let rank = model.fusion().config().rank;
    let mut doc = KvDoc::new();
    doc.set("checkpoint", a.checkpoint.display());
    doc.set("task", a.task.display());
    doc.set("rank", rank);
    doc.set(
        "maps_dir",
        a.maps_dir.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string()),
    );
    doc.set("map_examples", a.map_examples);
    echo(out, "ablate", &doc)?;

    let full = evaluate(&model, &task.val)?;
    let n = task.val.len().max(1) as f64;
    let mut top1 = vec![0.0; rank];
    let mut vqa = vec![0.0; rank];
    let mut worst_sum = 0.0f64;
    for ex in &task.val {
        let visual = &ex.visual;
        let y = model.logits(&ex.q, visual)?;
        let mut summed = vec![0.0; y.len()];
        for r in 0..rank {
            let y_r = model.logits_rank_masked(&ex.q, visual, r)?;
            axpy(1.0, &y_r, &mut summed);
            let pred = argmax(&y_r);
            top1[r] += f64::from(u8::from(pred == ex.label));
            vqa[r] += vqa_accuracy(pred, &ex.answers);
        }
        worst_sum = worst_sum.max(max_relative(&summed, &y));
    }
    emit(out, format!("# full_top1={} full_vqa={}", fmt_f64(full.top1), fmt_f64(full.vqa)))?;
    emit(out, "rank\ttop1\tvqa")?;
    for r in 0..rank {
        emit(out, format!("{}\t{}\t{}", r + 1, fmt_f64(top1[r] / n), fmt_f64(vqa[r] / n)))?;
    }
    let sum_ok = worst_sum < LINEARITY_TOLERANCE;
    emit(
        out,
        format!(
            "# rank_sum_error={} tolerance={:.1e} status={}",
            fmt_f64(worst_sum),
            LINEARITY_TOLERANCE,
            if sum_ok { "pass" } else { "FAIL" }
        ),
    )?;

    if let (Some(dir), Some(stage)) = (&a.maps_dir, model.attention()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let scorer = &stage.scorer;
        for (i, ex) in task.val.iter().take(a.map_examples).enumerate() {
            let Visual::Grid(grid) = &ex.visual else { continue };
            let (full_map, _) = attend(scorer, grid, &ex.q)?;
            write_file(&dir.join(format!("example{i}_full.csv")), &full_map.to_csv())?;
            if scorer.scheme() != Scheme::Mutan {
                continue;
            }
            let maps = attention_ablation_maps(scorer, grid, &ex.q)?;
            let mut spread = 0.0f64;
            for (r, m) in maps.iter().enumerate() {
                write_file(&dir.join(format!("example{i}_rank{}.csv", r + 1)), &m.to_csv())?;
                for other in &maps[r + 1..] {
                    spread = spread.max(m.l1_distance(other));
                }
            }
            emit(out, format!("# example{i} max_pairwise_l1={}", fmt_f64(spread)))?;
        }
    }
    Ok(if sum_ok { Outcome::Success } else { Outcome::ToleranceBreach })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn gen_config(a: &GenArgs) -> SynthConfig {
    let mut cfg = SynthConfig::new(a.dq, a.dv, a.answers)
        .with_sizes(a.examples, a.val_examples.unwrap_or(a.examples / 4))
        .with_noise(a.noise)
        .with_regions(a.regions, a.region_noise)
        .with_seed(a.seed);
    cfg.planted = a.planted;
    cfg
}

fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = gen_config(a);
    let mut doc = KvDoc::new();
    doc.set("out", a.out.display());
    doc.set("d_q", cfg.d_q);
    doc.set("d_v", cfg.d_v);
    doc.set("answers", cfg.n_answers);
    doc.set(
        "planted",
        match cfg.planted {
            Planted::Dense => "dense".to_string(),
            Planted::Tucker { t_q, t_v, t_o, rank } => format!("tucker:{t_q},{t_v},{t_o},{rank}"),
        },
    );
    doc.set("noise", fmt_f64(cfg.noise_sigma));
    doc.set("n_train", cfg.n_train);
    doc.set("n_val", cfg.n_val);
    doc.set("regions", cfg.regions);
    doc.set("region_noise", fmt_f64(cfg.region_noise));
    doc.set("seed", cfg.seed);
    doc.set("verify", a.verify);
    echo(out, "gen", &doc)?;
    let task = generate(&cfg)?;
    write_dataset(&task, &a.out)?;
    emit(out, format!("# wrote {}", a.out.display()))?;
    if !a.verify {
        return Ok(Outcome::Success);
    }
    let back = read_dataset(&a.out)?;
    let round_trip = back == task;
    let (train, val) = back.oracle()?;
    emit(out, "split\texamples\toracle_top1\toracle_vqa")?;
    emit(out, format!("train\t{}\t{}\t{}", back.train.len(), fmt_f64(train.top1), fmt_f64(train.vqa)))?;
    emit(out, format!("val\t{}\t{}\t{}", back.val.len(), fmt_f64(val.top1), fmt_f64(val.vqa)))?;
    emit(out, format!("# round_trip={}", if round_trip { "ok" } else { "MISMATCH" }))?;
    let solvable = cfg.noise_sigma > 0.0
        || [(&back.train, train), (&back.val, val)]
            .iter()
            .all(|(split, score)| split.is_empty() || (score.top1 == 1.0 && score.vqa == 1.0));
    if !solvable {
        emit(out, "# noiseless task is not perfectly solved by its planted tensor")?;
    }
    Ok(if round_trip && solvable {
        Outcome::Success
    } else {
        Outcome::ToleranceBreach
    })
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Format(_) => CliError::Io(e.to_string()),
            Error::InvalidConfig(_) | Error::ZeroDimension(_) | Error::DimensionMismatch { .. } | Error::Unsupported(_) => {
                CliError::Usage(e.to_string())
            }
            Error::NonFinite(_) | Error::StaleCache(_) | Error::TrainingAborted { .. } => {
                CliError::Failed(e.to_string())
            }
        }
    }
}
