//! Planted-tensor classification tasks and their on-disk format.
//!
//! Each example draws `q` and `v` from a standard normal; its clean label is
//! the argmax of the planted bilinear score `(T ×₁ q) ×₂ v`. Ten annotator
//! answers are synthesized around the clean label. In grid mode `v` is
//! hidden in one region of a grid whose other regions carry low-amplitude
//! noise.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::RegionGrid;
use crate::error::{Error, FormatError, Result};
use crate::format::{self, fmt_f64, Array, KvDoc};
use crate::fusion::core_from_slices;
use crate::model::{Visual, VqaModel};
use crate::tensor::{argmax, tucker_reconstruct, Matrix, Tensor3};
use crate::train::{vqa_accuracy, Example};

/// Annotators per example.
pub const ANSWERS_PER_EXAMPLE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Planted {
    /// I.i.d. standard normal entries.
    Dense,
    /// Tucker reconstruction whose core has mode-3 slices of rank ≤ `rank`.
    Tucker {
        t_q: usize,
        t_v: usize,
        t_o: usize,
        rank: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub d_q: usize,
    pub d_v: usize,
    pub n_answers: usize,
    pub planted: Planted,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    /// Regions per grid; 0 produces plain visual vectors.
    pub regions: usize,
    /// Standard deviation of the non-signal regions.
    pub region_noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(d_q: usize, d_v: usize, n_answers: usize) -> Self {
        SynthConfig {
            d_q,
            d_v,
            n_answers,
            planted: Planted::Dense,
            noise_sigma: 0.0,
            n_train: 0,
            n_val: 0,
            regions: 0,
            region_noise: 0.1,
            seed: 0,
        }
    }

    pub fn with_tucker(mut self, t_q: usize, t_v: usize, t_o: usize, rank: usize) -> Self {
        self.planted = Planted::Tucker { t_q, t_v, t_o, rank };
        self
    }

    pub fn with_sizes(mut self, n_train: usize, n_val: usize) -> Self {
        self.n_train = n_train;
        self.n_val = n_val;
        self
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_regions(mut self, regions: usize, region_noise: f64) -> Self {
        self.regions = regions;
        self.region_noise = region_noise;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Probability that an annotator deviates from the clean label.
    pub fn p_noise(&self) -> f64 {
        self.noise_sigma.min(0.5)
    }

    /// How many of the ten answers repeat the clean label.
    pub fn clean_votes(&self) -> usize {
        (ANSWERS_PER_EXAMPLE as f64 * (1.0 - self.p_noise())).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_q == 0 || self.d_v == 0 || self.n_answers == 0 {
            return Err(Error::ZeroDimension("synthetic task dims must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise sigma must be finite and >= 0".into()));
        }
        if !(self.region_noise >= 0.0 && self.region_noise.is_finite()) {
            return Err(Error::InvalidConfig("region noise must be finite and >= 0".into()));
        }
        if self.n_answers == 1 && self.clean_votes() < ANSWERS_PER_EXAMPLE {
            return Err(Error::InvalidConfig("noisy answers need at least 2 labels".into()));
        }
        if self.n_answers > i32::MAX as usize {
            return Err(Error::InvalidConfig("answer count does not fit a 32-bit label".into()));
        }
        if let Planted::Tucker { t_q, t_v, t_o, rank } = self.planted {
            if t_q == 0 || t_v == 0 || t_o == 0 {
                return Err(Error::ZeroDimension("planted Tucker dims must be positive".into()));
            }
            if rank == 0 || rank > t_q.min(t_v) {
                return Err(Error::InvalidConfig(format!(
                    "planted rank {rank} must lie in 1..={}",
                    t_q.min(t_v)
                )));
            }
        }
        Ok(())
    }

    fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("kind", "dataset");
        doc.set("d_q", self.d_q);
        doc.set("d_v", self.d_v);
        doc.set("answers", self.n_answers);
        match self.planted {
            Planted::Dense => doc.set("planted", "dense"),
            Planted::Tucker { t_q, t_v, t_o, rank } => {
                doc.set("planted", "tucker");
                doc.set("planted.t_q", t_q);
                doc.set("planted.t_v", t_v);
                doc.set("planted.t_o", t_o);
                doc.set("planted.rank", rank);
            }
        }
        doc.set("noise", fmt_f64(self.noise_sigma));
        doc.set("n_train", self.n_train);
        doc.set("n_val", self.n_val);
        doc.set("regions", self.regions);
        doc.set("region_noise", fmt_f64(self.region_noise));
        doc.set("seed", self.seed);
        doc
    }

    fn from_kv(doc: &KvDoc) -> Result<Self> {
        if doc.require("kind")? != "dataset" {
            return Err(FormatError::Manifest("manifest does not describe a dataset".into()).into());
        }
        let planted = match doc.require("planted")? {
            "dense" => Planted::Dense,
            "tucker" => Planted::Tucker {
                t_q: doc.parse_key("planted.t_q")?,
                t_v: doc.parse_key("planted.t_v")?,
                t_o: doc.parse_key("planted.t_o")?,
                rank: doc.parse_key("planted.rank")?,
            },
            other => return Err(FormatError::Manifest(format!("unknown planted kind `{other}`")).into()),
        };
        let cfg = SynthConfig {
            d_q: doc.parse_key("d_q")?,
            d_v: doc.parse_key("d_v")?,
            n_answers: doc.parse_key("answers")?,
            planted,
            noise_sigma: doc.parse_key("noise")?,
            n_train: doc.parse_key("n_train")?,
            n_val: doc.parse_key("n_val")?,
            regions: doc.parse_key("regions")?,
            region_noise: doc.parse_key("region_noise")?,
            seed: doc.parse_key("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for Planted {
    type Err = Error;

    /// `dense` or `tucker:t_q,t_v,t_o,rank`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "dense" {
            return Ok(Planted::Dense);
        }
        let bad = || Error::InvalidConfig(format!("cannot parse planted structure `{s}`"));
        let rest = s.strip_prefix("tucker:").ok_or_else(bad)?;
        let v: Vec<usize> = rest
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match v[..] {
            [t_q, t_v, t_o, rank] => Ok(Planted::Tucker { t_q, t_v, t_o, rank }),
            _ => Err(bad()),
        }
    }
}

/// A generated task. `signal[i]` is the region holding the informative
/// visual vector of example `i` (always 0 outside grid mode).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub config: SynthConfig,
    pub planted: Tensor3,
    pub train: Vec<Example>,
    pub train_signal: Vec<usize>,
    pub val: Vec<Example>,
    pub val_signal: Vec<usize>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, normal_vec(rng, rows * cols)).expect("positive dims")
}

fn planted_tensor(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Tensor3> {
    let dims = [cfg.d_q, cfg.d_v, cfg.n_answers];
    match cfg.planted {
        Planted::Dense => Tensor3::from_vec(dims, normal_vec(rng, dims.iter().product())),
        Planted::Tucker { t_q, t_v, t_o, rank } => {
            let wq = normal_matrix(rng, cfg.d_q, t_q);
            let wv = normal_matrix(rng, cfg.d_v, t_v);
            let wo = normal_matrix(rng, cfg.n_answers, t_o);
            let m: Vec<Matrix> = (0..rank).map(|_| normal_matrix(rng, t_q, t_o)).collect();
            let n: Vec<Matrix> = (0..rank).map(|_| normal_matrix(rng, t_v, t_o)).collect();
            tucker_reconstruct(&core_from_slices(&m, &n)?, &wq, &wv, &wo)
        }
    }
}

/// The planted label: argmax of the bilinear score.
pub fn clean_label(planted: &Tensor3, q: &[f64], v: &[f64]) -> Result<usize> {
    Ok(argmax(&planted.bilinear(q, v)?))
}

fn answers_for(cfg: &SynthConfig, clean: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut answers = vec![clean; cfg.clean_votes()];
    while answers.len() < ANSWERS_PER_EXAMPLE {
        // uniform over the other labels
        let mut other = rng.random_range(0..cfg.n_answers - 1);
        if other >= clean {
            other += 1;
        }
        answers.push(other);
    }
    answers
}

fn example(cfg: &SynthConfig, planted: &Tensor3, rng: &mut ChaCha8Rng) -> Result<(Example, usize)> {
    let q = normal_vec(rng, cfg.d_q);
    let v = normal_vec(rng, cfg.d_v);
    let label = clean_label(planted, &q, &v)?;
    let answers = answers_for(cfg, label, rng);
    let (visual, signal) = if cfg.regions == 0 {
        (Visual::Vector(v), 0)
    } else {
        let signal = rng.random_range(0..cfg.regions);
        let mut rows = Vec::with_capacity(cfg.regions);
        for i in 0..cfg.regions {
            if i == signal {
                rows.push(v.clone());
            } else {
                rows.push(normal_vec(rng, cfg.d_v).into_iter().map(|x| x * cfg.region_noise).collect());
            }
        }
        (Visual::Grid(RegionGrid::from_rows(&rows)?), signal)
    };
    Ok((Example { q, visual, answers, label }, signal))
}

/// Deterministic in `(config, seed)`: the planted tensor is drawn first,
/// then the training examples, then the validation examples.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let planted = planted_tensor(cfg, &mut rng)?;
    let mut split = |n: usize| -> Result<(Vec<Example>, Vec<usize>)> {
        (0..n).map(|_| example(cfg, &planted, &mut rng)).collect::<Result<Vec<_>>>().map(|v| v.into_iter().unzip())
    };
    let (train, train_signal) = split(cfg.n_train)?;
    let (val, val_signal) = split(cfg.n_val)?;
    Ok(SyntheticTask {
        config: cfg.clone(),
        planted,
        train,
        train_signal,
        val,
        val_signal,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleScore {
    pub top1: f64,
    pub vqa: f64,
}

/// Scores the planted tensor itself as a predictor on a split.
pub fn oracle_accuracy(planted: &Tensor3, examples: &[Example], signal: &[usize]) -> Result<OracleScore> {
    if examples.is_empty() {
        return Ok(OracleScore { top1: 0.0, vqa: 0.0 });
    }
    let mut top1 = 0.0;
    let mut vqa = 0.0;
    for (ex, &s) in examples.iter().zip(signal) {
        let v = match &ex.visual {
            Visual::Vector(v) => v.as_slice(),
            Visual::Grid(g) => g.region(s),
        };
        let pred = clean_label(planted, &ex.q, v)?;
        top1 += f64::from(u8::from(pred == ex.label));
        vqa += vqa_accuracy(pred, &ex.answers);
    }
    let n = examples.len() as f64;
    Ok(OracleScore {
        top1: top1 / n,
        vqa: vqa / n,
    })
}

impl SyntheticTask {
    pub fn oracle(&self) -> Result<(OracleScore, OracleScore)> {
        Ok((
            oracle_accuracy(&self.planted, &self.train, &self.train_signal)?,
            oracle_accuracy(&self.planted, &self.val, &self.val_signal)?,
        ))
    }

    /// Checks that a model accepts this task's inputs.
    pub fn check_model(&self, model: &VqaModel) -> Result<()> {
        let c = &self.config;
        crate::error::check_dim("model d_q vs task", c.d_q, model.d_q())?;
        crate::error::check_dim("model answers vs task", c.n_answers, model.answer_count())?;
        crate::error::check_dim("model region dim vs task", c.d_v, model.region_dim())?;
        if (c.regions > 0) != model.attention().is_some() {
            return Err(Error::InvalidConfig(
                "grid tasks need a model with attention and vector tasks one without".into(),
            ));
        }
        Ok(())
    }
}

fn split_arrays(prefix: &str, cfg: &SynthConfig, examples: &[Example], signal: &[usize]) -> Vec<Array> {
    let n = examples.len();
    let q: Vec<f64> = examples.iter().flat_map(|e| e.q.iter().copied()).collect();
    let mut v = Vec::new();
    for e in examples {
        match &e.visual {
            Visual::Vector(x) => v.extend_from_slice(x),
            Visual::Grid(g) => v.extend_from_slice(g.as_matrix().data()),
        }
    }
    let v_dims = if cfg.regions == 0 {
        vec![n, cfg.d_v]
    } else {
        vec![n, cfg.regions, cfg.d_v]
    };
    let answers: Vec<i32> = examples
        .iter()
        .flat_map(|e| e.answers.iter().map(|&a| a as i32))
        .collect();
    let labels: Vec<i32> = examples.iter().map(|e| e.label as i32).collect();
    vec![
        Array::f64(format!("{prefix}.q"), vec![n, cfg.d_q], q),
        Array::f64(format!("{prefix}.v"), v_dims, v),
        Array::i32(format!("{prefix}.answers"), vec![n, ANSWERS_PER_EXAMPLE], answers),
        Array::i32(format!("{prefix}.labels"), vec![n], labels),
        Array::i32(
            format!("{prefix}.signal"),
            vec![n],
            signal.iter().map(|&s| s as i32).collect(),
        ),
    ]
}

fn label(x: i32, bound: usize, what: &str) -> Result<usize> {
    usize::try_from(x)
        .ok()
        .filter(|&l| l < bound)
        .ok_or_else(|| FormatError::Record(format!("{what} value {x} out of range 0..{bound}")).into())
}

fn expect_dims(a: &Array, dims: &[usize]) -> Result<()> {
    if a.dims != dims {
        return Err(FormatError::Record(format!("{} has dims {:?}, expected {:?}", a.name, a.dims, dims)).into());
    }
    Ok(())
}

fn read_split(prefix: &str, cfg: &SynthConfig, n: usize, arrays: &[Array]) -> Result<(Vec<Example>, Vec<usize>)> {
    let get = |suffix: &str| format::find(arrays, &format!("{prefix}.{suffix}"));
    let q = get("q")?;
    let v = get("v")?;
    let answers = get("answers")?;
    let labels = get("labels")?;
    let signal = get("signal")?;
    expect_dims(q, &[n, cfg.d_q])?;
    if cfg.regions == 0 {
        expect_dims(v, &[n, cfg.d_v])?;
    } else {
        expect_dims(v, &[n, cfg.regions, cfg.d_v])?;
    }
    expect_dims(answers, &[n, ANSWERS_PER_EXAMPLE])?;
    expect_dims(labels, &[n])?;
    expect_dims(signal, &[n])?;
    let (q, v, answers, labels, signal) = (
        q.as_f64()?,
        v.as_f64()?,
        answers.as_i32()?,
        labels.as_i32()?,
        signal.as_i32()?,
    );
    let v_len = cfg.d_v * cfg.regions.max(1);
    let mut examples = Vec::with_capacity(n);
    let mut signals = Vec::with_capacity(n);
    for i in 0..n {
        let vi = v[i * v_len..(i + 1) * v_len].to_vec();
        let visual = if cfg.regions == 0 {
            Visual::Vector(vi)
        } else {
            Visual::Grid(RegionGrid::new(Matrix::from_vec(cfg.regions, cfg.d_v, vi)?))
        };
        let ans = answers[i * ANSWERS_PER_EXAMPLE..(i + 1) * ANSWERS_PER_EXAMPLE]
            .iter()
            .map(|&a| label(a, cfg.n_answers, "answer"))
            .collect::<Result<_>>()?;
        examples.push(Example {
            q: q[i * cfg.d_q..(i + 1) * cfg.d_q].to_vec(),
            visual,
            answers: ans,
            label: label(labels[i], cfg.n_answers, "label")?,
        });
        signals.push(label(signal[i], cfg.regions.max(1), "signal")?);
    }
    Ok((examples, signals))
}

/// Writes the manifest at `path` and the blob next to it.
pub fn write_dataset(task: &SyntheticTask, path: &Path) -> Result<()> {
    let cfg = &task.config;
    let mut meta = cfg.to_kv();
    meta.set("n_train", task.train.len());
    meta.set("n_val", task.val.len());
    let mut arrays = vec![Array::f64("planted", task.planted.dims().to_vec(), task.planted.data().to_vec())];
    arrays.extend(split_arrays("train", cfg, &task.train, &task.train_signal));
    arrays.extend(split_arrays("val", cfg, &task.val, &task.val_signal));
    format::write_bundle(path, &meta, &arrays)
}

pub fn read_dataset(path: &Path) -> Result<SyntheticTask> {
    let (meta, arrays) = format::read_bundle(path)?;
    let config = SynthConfig::from_kv(&meta)?;
    let planted = format::find(&arrays, "planted")?;
    expect_dims(planted, &[config.d_q, config.d_v, config.n_answers])?;
    let planted = Tensor3::from_vec([config.d_q, config.d_v, config.n_answers], planted.as_f64()?.to_vec())?;
    let (train, train_signal) = read_split("train", &config, config.n_train, &arrays)?;
    let (val, val_signal) = read_split("val", &config, config.n_val, &arrays)?;
    Ok(SyntheticTask {
        config,
        planted,
        train,
        train_signal,
        val,
        val_signal,
    })
}
