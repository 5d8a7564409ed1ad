//! Fine-tuning: AdamW with decoupled weight decay, warmup-then-linear-decay
//! schedule, global gradient clipping, best-validation-epoch snapshotting.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{batches, EncodedDataset};
use crate::error::{Error, Result};
use crate::model::{backward_with_dropout, forward, DropoutStep, ModelConfig, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            epochs: 3,
            batch_size: 32,
            eval_batch_size: 64,
            seed: 42,
            max_grad_norm: 1.0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the learning rate scaled ×10 for tiny models.
    pub fn desk() -> Self {
        Self {
            learning_rate: 3e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("eps", self.eps),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::TrainConfig(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::TrainConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::TrainConfig("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::TrainConfig("warmup_fraction must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::TrainConfig("batch sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Linear warmup to the peak rate, then linear decay towards zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        Self {
            peak,
            warmup_steps: (warmup_fraction * total_steps as f64).ceil() as usize,
            total_steps,
        }
    }

    pub fn constant(peak: f64) -> Self {
        Self {
            peak,
            warmup_steps: 0,
            total_steps: usize::MAX,
        }
    }

    /// Rate for 1-based `step`. Warmup steps climb to the peak at
    /// `warmup_steps`; afterwards the rate falls linearly so the step after
    /// the last one would be zero.
    pub fn lr(&self, step: usize) -> f64 {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step <= w {
            return self.peak * step as f64 / w as f64;
        }
        if t == usize::MAX {
            return self.peak;
        }
        let remaining = (t + 1).saturating_sub(step) as f64;
        self.peak * remaining / (t - w) as f64
    }
}

/// Biases and layer-norm parameters are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelWeights<T>) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ModelWeights<T>, max_norm: f64) -> Result<f64> {
    let norm = grads
        .named_tensors()
        .iter()
        .map(|(_, t)| t.sq_norm().as_f64())
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, t) in grads.named_tensors_mut() {
            t.scale(s);
        }
    }
    Ok(norm)
}

/// One AdamW update at 1-based `step`, after clipping.
pub fn optimizer_step<T: Scalar>(
    params: &mut ModelWeights<T>,
    grads: &mut ModelWeights<T>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
    schedule: &LrSchedule,
    step: usize,
) -> Result<()> {
    if step == 0 {
        return Err(Error::TrainConfig("optimizer steps are 1-based".into()));
    }
    for (name, g) in grads.named_tensors() {
        g.check_finite(&format!("gradient of {name}"))?;
    }
    clip_grad_norm(grads, config.max_grad_norm)?;

    let lr = schedule.lr(step);
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = T::of(1.0 - b1.powi(step as i32));
    let bc2 = T::of(1.0 - b2.powi(step as i32));
    let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(config.eps));
    let lr_t = T::of(lr);
    let decay = T::of(lr * config.weight_decay);

    let grads = grads.named_tensors();
    for (i, (name, p)) in params.named_tensors_mut().into_iter().enumerate() {
        let g = grads[i].1.data();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let wd = if decays(&name) { decay } else { T::zero() };
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *x = *x - lr_t * m_hat / (v_hat.sqrt() + eps) - wd * *x;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept; `None` if nothing ran.
    pub best_epoch: Option<usize>,
    pub best_validation_accuracy: f64,
}

impl TrainHistory {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tvalidation_accuracy\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{}\t{:.6}\t{:.4}", r.epoch, r.train_loss, r.validation_accuracy);
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Epoch | Train loss | Validation accuracy |\n|---:|---:|---:|\n");
        for r in &self.epochs {
            let mark = if Some(r.epoch) == self.best_epoch { " (best)" } else { "" };
            let _ = writeln!(
                out,
                "| {} | {:.6} | {:.2}{mark} |",
                r.epoch,
                r.train_loss,
                100.0 * r.validation_accuracy
            );
        }
        out
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows of `logits` whose argmax equals the label.
pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(logits.row(r)) == l)
        .count()
}

pub fn predict<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    dataset: &EncodedDataset,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(dataset.len());
    for batch in batches(dataset, batch_size, 0, 0, false)? {
        let logits = forward(weights, config, &batch)?;
        out.extend((0..batch.batch_size).map(|r| argmax(logits.row(r))));
    }
    Ok(out)
}

/// Fraction of examples whose argmax prediction matches the label.
pub fn evaluate<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    dataset: &EncodedDataset,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict(weights, config, dataset, batch_size)?;
    let correct = preds.iter().zip(&dataset.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Trains for `tconfig.epochs` epochs and returns the weights from the epoch
/// with the highest validation accuracy (earliest on ties).
pub fn finetune<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    train: &EncodedDataset,
    validation: &EncodedDataset,
    tconfig: &TrainConfig,
) -> Result<(ModelWeights<T>, TrainHistory)> {
    tconfig.validate()?;
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    for (what, ds) in [("training", train), ("validation", validation)] {
        if ds.num_labels != config.num_classes {
            return Err(Error::Data(format!(
                "{what} set has {} labels, model has {} classes",
                ds.num_labels, config.num_classes
            )));
        }
    }

    let mut history = TrainHistory::default();
    if tconfig.epochs == 0 {
        return Ok((weights.clone(), history));
    }

    let per_epoch = train.len().div_ceil(tconfig.batch_size);
    let schedule = LrSchedule::new(tconfig.learning_rate, tconfig.warmup_fraction, per_epoch * tconfig.epochs);
    let mut params = weights.clone();
    let mut state = AdamState::new(&params);
    let mut best = params.clone();
    let mut step = 0usize;

    for epoch in 1..=tconfig.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in batches(train, tconfig.batch_size, tconfig.seed, epoch as u64, true)? {
            step += 1;
            let dropout = DropoutStep {
                seed: tconfig.seed,
                step: step as u64,
            };
            let (loss, mut grads) = backward_with_dropout(&params, config, &batch, Some(dropout))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            loss_sum += loss.as_f64() * batch.batch_size as f64;
            seen += batch.batch_size;
            optimizer_step(&mut params, &mut grads, &mut state, tconfig, &schedule, step)?;
        }
        let acc = evaluate(&params, config, validation, tconfig.eval_batch_size)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            validation_accuracy: acc,
        });
        if history.best_epoch.is_none() || acc > history.best_validation_accuracy {
            history.best_epoch = Some(epoch);
            history.best_validation_accuracy = acc;
            best = params.clone();
        }
    }
    Ok((best, history))
}

/// Hex SHA-256 of the canonical JSON of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    Ok(Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLogEntry {
    pub config_hash: String,
    pub seed: u64,
    pub metrics: serde_json::Value,
}

/// Appends one JSON line to `path`.
pub fn append_experiment_log(path: impl AsRef<Path>, entry: &ExperimentLogEntry) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(entry)?)?;
    Ok(())
}
