//! Cross-entropy loss, Adam, answer sampling, the consensus accuracy metric
//! and a deterministic mini-batch training loop with early stopping.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::model::{VqaModel, Visual};
use crate::param::ParamVector;
use crate::tensor::{argmax, softmax};

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 512,
            max_epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch size used for models with an attention stage.
    pub const ATTENTION_BATCH: usize = 100;

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be finite and >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Best-validation snapshot kept for early stopping.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub params: ParamVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamVector,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub best: Checkpoint,
}

impl TrainState {
    pub fn new(params: ParamVector) -> Self {
        let n = params.len();
        TrainState {
            best: Checkpoint {
                epoch: 0,
                val_accuracy: f64::NEG_INFINITY,
                params: params.clone(),
            },
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// `−ln(max(p[target], 1e-12))`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    let p = *probs.get(target).ok_or_else(|| {
        Error::InvalidConfig(format!("target {target} out of range 0..{}", probs.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// One bias-corrected Adam update in place.
pub fn adam_step(state: &mut TrainState, grads: &[f64], cfg: &TrainConfig) -> Result<()> {
    check_dim("adam gradient length", state.params.len(), grads.len())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let params = state.params.values_mut();
    for i in 0..grads.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

fn label_counts(answers: &[usize]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for &a in answers {
        *counts.entry(a).or_insert(0) += 1;
    }
    counts
}

/// Uniform choice among labels given by at least 3 annotators; otherwise
/// the most frequent label (lowest label on ties).
pub fn sample_answer<R: Rng + ?Sized>(answers: &[usize], rng: &mut R) -> Result<usize> {
    if answers.is_empty() {
        return Err(Error::InvalidConfig("answer multiset is empty".into()));
    }
    let counts = label_counts(answers);
    let frequent: Vec<usize> = counts
        .iter()
        .filter(|(_, &c)| c >= 3)
        .map(|(&label, _)| label)
        .collect();
    if !frequent.is_empty() {
        return Ok(frequent[rng.random_range(0..frequent.len())]);
    }
    let mut best = (0, usize::MAX);
    for (&label, &c) in &counts {
        if c > best.0 {
            best = (c, label);
        }
    }
    Ok(best.1)
}

/// Consensus accuracy `min(1, #annotators who gave `predicted` / 3)`.
pub fn vqa_accuracy(predicted: usize, answers: &[usize]) -> f64 {
    let n = answers.iter().filter(|&&a| a == predicted).count();
    (n as f64 / 3.0).min(1.0)
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub q: Vec<f64>,
    pub visual: Visual,
    /// The ten annotator answers.
    pub answers: Vec<usize>,
    /// Ground-truth label used for top-1 accuracy.
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub top1: f64,
    pub vqa: f64,
    /// Mean cross-entropy against the ground-truth label.
    pub loss: f64,
}

pub fn evaluate(model: &VqaModel, examples: &[Example]) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Ok(EvalMetrics {
            top1: 0.0,
            vqa: 0.0,
            loss: 0.0,
        });
    }
    let mut correct = 0usize;
    let mut vqa = 0.0;
    let mut loss = 0.0;
    for ex in examples {
        let y = model.logits(&ex.q, &ex.visual)?;
        let pred = argmax(&y);
        correct += usize::from(pred == ex.label);
        vqa += vqa_accuracy(pred, &ex.answers);
        loss += cross_entropy(&softmax(&y), ex.label)?;
    }
    let n = examples.len() as f64;
    Ok(EvalMetrics {
        top1: correct as f64 / n,
        vqa: vqa / n,
        loss: loss / n,
    })
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub wall_ms: u128,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\ttrain_loss\ttrain_acc\tval_acc\twall_ms";

    /// Same record with the wall-clock column zeroed, for reproducible logs.
    pub fn without_timing(mut self) -> Self {
        self.wall_ms = 0;
        self
    }
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.epoch,
            crate::format::fmt_f64(self.train_loss),
            crate::format::fmt_f64(self.train_acc),
            crate::format::fmt_f64(self.val_acc),
            self.wall_ms
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub state: TrainState,
    /// Epoch 0 evaluates the initial parameters; its loss is measured
    /// against the ground-truth labels since no answers were sampled yet.
    pub history: Vec<EpochRecord>,
}

/// Mini-batch Adam over `train`, evaluating top-1 on `val` after every
/// epoch. The model is left holding the best-validation parameters (the
/// earliest epoch on ties, epoch 0 being the initialization).
pub fn train_loop(
    model: &mut VqaModel,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState::new(model.pack());
    let mut grads = model.zero_grads();
    let mut flat = vec![0.0; state.params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.max_epochs + 1);

    let start = Instant::now();
    let before = evaluate(model, train)?;
    let initial = EpochRecord {
        epoch: 0,
        train_loss: before.loss,
        train_acc: before.top1,
        val_acc: evaluate(model, val)?.top1,
        wall_ms: start.elapsed().as_millis(),
    };
    state.best = Checkpoint {
        epoch: 0,
        val_accuracy: initial.val_acc,
        params: state.params.clone(),
    };
    on_epoch(&initial);
    history.push(initial);

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            for &idx in batch {
                let ex = &train[idx];
                let target = sample_answer(&ex.answers, &mut rng)?;
                let (y, cache) = model.forward_train(&ex.q, &ex.visual)?;
                let probs = softmax(&y);
                let loss = cross_entropy(&probs, target)?;
                if !loss.is_finite() {
                    return Err(Error::TrainingAborted {
                        epoch,
                        reason: format!("non-finite loss on example {idx}"),
                    });
                }
                loss_sum += loss;
                correct += usize::from(argmax(&y) == ex.label);
                let scale = 1.0 / batch.len() as f64;
                let d_y: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| (p - f64::from(u8::from(k == target))) * scale)
                    .collect();
                model.backward_into(&ex.visual, &cache, &d_y, &mut grads)?;
            }
            grads.pack_into(&mut flat);
            adam_step(&mut state, &flat, cfg)?;
            if state.params.values().iter().any(|x| !x.is_finite()) {
                return Err(Error::TrainingAborted {
                    epoch,
                    reason: "parameters became non-finite".into(),
                });
            }
            model.unpack_values(state.params.values())?;
        }
        let val_acc = evaluate(model, val)?.top1;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            wall_ms: t0.elapsed().as_millis(),
        };
        if val_acc > state.best.val_accuracy {
            state.best = Checkpoint {
                epoch,
                val_accuracy: val_acc,
                params: state.params.clone(),
            };
        }
        on_epoch(&record);
        history.push(record);
    }
    model.unpack(&state.best.params)?;
    Ok(TrainReport { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        let l = cross_entropy(&[0.25; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let floor = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!((floor - 27.631021115928547).abs() < 1e-9);
        assert!(cross_entropy(&[1.0], 3).is_err());
    }

    fn scalar_state(theta: f64) -> TrainState {
        let mut m = crate::param::Manifest::new();
        m.push("theta", vec![1]);
        TrainState::new(ParamVector::from_values(m, vec![theta]).unwrap())
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut s = scalar_state(0.0);
        adam_step(&mut s, &[1.0], &TrainConfig::default()).unwrap();
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((s.params.values()[0] - expected).abs() < 1e-12);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = scalar_state(0.75);
        adam_step(&mut s, &[0.0], &TrainConfig::default()).unwrap();
        assert_eq!(s.params.values()[0], 0.75);
        assert!(adam_step(&mut s, &[0.0, 1.0], &TrainConfig::default()).is_err());
    }

    #[test]
    fn vqa_accuracy_cases() {
        let answers = |k: usize| {
            let mut a = vec![1usize; k];
            a.resize(10, 0);
            a
        };
        assert_eq!(vqa_accuracy(1, &answers(4)), 1.0);
        assert!((vqa_accuracy(1, &answers(2)) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(vqa_accuracy(1, &answers(0)), 0.0);
        assert_eq!(vqa_accuracy(1, &answers(3)), 1.0);
    }

    #[test]
    fn sample_answer_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_answer(&[4; 10], &mut rng).unwrap(), 4);
        // nobody reaches 3: most frequent, lowest label on ties
        let a = [5, 5, 2, 2, 7, 8, 9, 1, 3, 4];
        assert_eq!(sample_answer(&a, &mut rng).unwrap(), 2);
        assert!(sample_answer(&[], &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
