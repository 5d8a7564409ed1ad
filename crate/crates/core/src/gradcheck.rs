//! Central finite-difference verification of analytic gradients (64-bit only).

use rand::Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{backward, forward, ModelConfig, ModelWeights};
use crate::ops::{self, Dual};
use crate::rng;
use crate::tensor::Tensor;

/// Denominator floor in the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against the fourth-order central difference
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h` for every coordinate
/// of every input tensor of the scalar function `loss`.
pub fn check_scalar_fn<F>(
    loss: F,
    point: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if analytic.len() != point.len()
        || analytic.iter().zip(point).any(|(a, p)| a.shape() != p.shape())
    {
        return Err(Error::Shape("analytic gradients must mirror the inputs".into()));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = point.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for c in 0..grad.len() {
            let orig = probe[i].data()[c];
            let mut at = |step: f64| -> Result<f64> {
                probe[i].data_mut()[c] = orig + step;
                loss(&probe)
            };
            let (up, down) = (at(h)?, at(-h)?);
            let (up2, down2) = (at(2.0 * h)?, at(-2.0 * h)?);
            probe[i].data_mut()[c] = orig;

            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * h);
            let a = grad.data()[c];
            let err = rel_err(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_err || report.coordinates == 1 {
                report.max_rel_err = err;
                report.worst = (i, c);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Checks a primitive's backward. Non-scalar outputs are reduced to a scalar
/// by a fixed random projection `Σ wᵢ·yᵢ`, so the analytic gradient is
/// `backward(w)`.
pub fn grad_check<F>(primitive: F, point: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Dual<f64>>,
{
    let base = primitive(point)?;
    let mut proj_rng = rng::stream(0, &[rng::tag("gradcheck-projection")]);
    let weights: Vec<f64> = (0..base.output.len())
        .map(|_| proj_rng.random_range(-1.0..1.0))
        .collect();
    let w = Tensor::new(base.output.shape().to_vec(), weights.clone())?;
    let analytic = base.backward(&w)?;
    let loss = |x: &[Tensor<f64>]| -> Result<f64> {
        let out = primitive(x)?;
        Ok(out.output.data().iter().zip(&weights).map(|(a, b)| a * b).sum())
    };
    check_scalar_fn(loss, point, &analytic, h)
}

/// Random ids and labels; each row keeps a random-length unmasked prefix of
/// at least one token.
pub fn random_batch(config: &ModelConfig, batch_size: usize, seq_len: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, &[rng::tag("random-batch")]);
    let mut input_ids = Vec::with_capacity(batch_size * seq_len);
    let mut attention_mask = Vec::with_capacity(batch_size * seq_len);
    for _ in 0..batch_size {
        let len = r.random_range(1..=seq_len);
        for s in 0..seq_len {
            let live = s < len;
            input_ids.push(if live { r.random_range(0..config.vocab_size) } else { 0 });
            attention_mask.push(live as u8);
        }
    }
    let labels = (0..batch_size).map(|_| r.random_range(0..config.num_classes)).collect();
    Batch {
        batch_size,
        seq_len,
        input_ids,
        attention_mask,
        labels,
    }
}

/// Checks every parameter of the full model (forward plus mean
/// cross-entropy) against central differences.
pub fn model_grad_check(weights: &ModelWeights<f64>, config: &ModelConfig, batch: &Batch, h: f64) -> Result<GradCheckReport> {
    let (_, grads) = backward(weights, config, batch)?;
    let (names, point): (Vec<String>, Vec<Tensor<f64>>) = weights
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .unzip();
    let analytic: Vec<Tensor<f64>> = grads.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let loss = |x: &[Tensor<f64>]| -> Result<f64> {
        let named = names.iter().cloned().zip(x.iter().cloned()).collect();
        let w = ModelWeights::from_named(config, named)?;
        Ok(ops::cross_entropy(&forward(&w, config, batch)?, &batch.labels)?.0)
    };
    check_scalar_fn(loss, &point, &analytic, h)
}
