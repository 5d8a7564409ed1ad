//! Differentiable primitives.
//!
//! Each primitive comes in two forms: a plain forward function paired with an
//! explicit `*_backward`, used by the encoder's hand-written backward pass, and
//! a [`Dual`] wrapper that bundles the output with a closure computing input
//! gradients, used by the gradient checker. Both forms share the same kernels.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = dyn Fn(&Tensor<T>) -> Result<Vec<Tensor<T>>> + Send + Sync;

/// Output of a primitive together with its vector-Jacobian product.
pub struct Dual<T> {
    pub output: Tensor<T>,
    backward: Box<BackwardFn<T>>,
}

impl<T: Scalar> Dual<T> {
    pub fn new(
        output: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Result<Vec<Tensor<T>>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            output,
            backward: Box::new(backward),
        }
    }

    /// Maps an output gradient to one gradient per input, in input order.
    pub fn backward(&self, grad_output: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if grad_output.shape() != self.output.shape() {
            return Err(Error::Shape(format!(
                "backward expects {:?}, got {:?}",
                self.output.shape(),
                grad_output.shape()
            )));
        }
        (self.backward)(grad_output)
    }
}

fn finite<T: Scalar>(t: Tensor<T>, op: &str) -> Result<Tensor<T>> {
    t.check_finite(op)?;
    Ok(t)
}

// ---------------------------------------------------------------------------
// GEMM kernels. All accumulate into `c`; loop order is fixed so results are
// bitwise reproducible.
// ---------------------------------------------------------------------------

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += api * bj;
            }
        }
    }
}

/// `y[rows×out] = x[rows×in] · w[out×in]ᵀ + bias`
pub(crate) fn linear<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>, bias: &Tensor<T>) -> Vec<T> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(bias.data());
    }
    gemm_nt(rows, inp, out, x, w.data(), &mut y);
    y
}

/// Accumulates weight and bias gradients of [`linear`] and returns `dx`.
pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    rows: usize,
    w: &Tensor<T>,
    dy: &[T],
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Vec<T> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    gemm_tn(out, rows, inp, dy, x, dw.data_mut());
    let db = db.data_mut();
    for r in 0..rows {
        for (b, &g) in db.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
            *b += g;
        }
    }
    let mut dx = vec![T::zero(); rows * inp];
    gemm_nn(rows, out, inp, dy, w.data(), &mut dx);
    dx
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut c = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut c);
    finite(Tensor::new(vec![m, n], c)?, "matmul")
}

/// Returns `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if dc.shape() != [m, n] {
        return Err(Error::Shape(format!("matmul grad shape {:?}", dc.shape())));
    }
    let mut da = vec![T::zero(); m * k];
    gemm_nt(m, n, k, dc.data(), b.data(), &mut da);
    let mut db = vec![T::zero(); k * n];
    gemm_tn(k, m, n, a.data(), dc.data(), &mut db);
    Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
}

pub fn matmul_dual<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Dual<T>> {
    let out = matmul(a, b)?;
    let (a, b) = (a.clone(), b.clone());
    Ok(Dual::new(out, move |dc| {
        let (da, db) = matmul_backward(&a, &b, dc)?;
        Ok(vec![da, db])
    }))
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// In-place max-subtracted softmax over one contiguous row.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `dx = y ⊙ (dy − Σ dy·y)` over one row.
pub(crate) fn softmax_row_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d = yi * (gi - dot);
    }
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    x.check_finite("softmax input")?;
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut y = x.clone();
    let data = y.data_mut();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for r in 0..inner {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = data[(o * len + i) * inner + r];
            }
            softmax_row(&mut buf);
            for (i, &b) in buf.iter().enumerate() {
                data[(o * len + i) * inner + r] = b;
            }
        }
    }
    finite(y, "softmax")
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if y.shape() != dy.shape() {
        return Err(Error::Shape("softmax grad shape".into()));
    }
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let mut dx = Tensor::zeros(y.shape());
    let (ys, gs) = (y.data(), dy.data());
    let mut yb = vec![T::zero(); len];
    let mut gb = vec![T::zero(); len];
    let mut db = vec![T::zero(); len];
    for o in 0..outer {
        for r in 0..inner {
            for i in 0..len {
                yb[i] = ys[(o * len + i) * inner + r];
                gb[i] = gs[(o * len + i) * inner + r];
            }
            softmax_row_backward(&yb, &gb, &mut db);
            for (i, &d) in db.iter().enumerate() {
                dx.data_mut()[(o * len + i) * inner + r] = d;
            }
        }
    }
    Ok(dx)
}

pub fn softmax_dual<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Dual<T>> {
    let y = softmax(x, axis)?;
    let saved = y.clone();
    Ok(Dual::new(y, move |dy| Ok(vec![softmax_backward(&saved, dy, axis)?])))
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

/// Values saved by [`layer_norm`] for its backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    /// Normalized input before the affine step.
    pub xhat: Vec<T>,
    /// `1/√(var+eps)` per row.
    pub rstd: Vec<T>,
    pub width: usize,
}

pub(crate) fn layer_norm_slice<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let width = gamma.len();
    let rows = x.len() / width;
    let n = T::of(width as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x[r * width..(r + 1) * width];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..width {
            let h = (xs[j] - mean) * rs;
            xhat[r * width + j] = h;
            y[r * width + j] = h * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd, width })
}

/// Returns `dx` and accumulates into `dgamma`/`dbeta`.
pub(crate) fn layer_norm_backward_slice<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &[T],
    dy: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let width = cache.width;
    let rows = dy.len() / width;
    let n = T::of(width as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); width];
    for r in 0..rows {
        let off = r * width;
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..width {
            let g = dy[off + j];
            let h = cache.xhat[off + j];
            dgamma[j] += g * h;
            dbeta[j] += g;
            dxhat[j] = g * gamma[j];
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * h;
        }
        let k = cache.rstd[r] / n;
        for j in 0..width {
            dx[off + j] = k * (n * dxhat[j] - sum_d - cache.xhat[off + j] * sum_dx);
        }
    }
    dx
}

fn check_ln_params<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let width = *x.shape().last().unwrap();
    if gamma.len() != width || beta.len() != width {
        return Err(Error::Shape(format!(
            "layer_norm params must have length {width}, got {} and {}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Per-row normalization over the last axis with biased variance, then affine.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    check_ln_params(x, gamma, beta)?;
    let (y, cache) = layer_norm_slice(x.data(), gamma.data(), beta.data(), eps);
    Ok((finite(Tensor::new(x.shape().to_vec(), y)?, "layer_norm")?, cache))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    let dx = layer_norm_backward_slice(
        cache,
        gamma.data(),
        dy.data(),
        dgamma.data_mut(),
        dbeta.data_mut(),
    );
    Ok((Tensor::new(dy.shape().to_vec(), dx)?, dgamma, dbeta))
}

pub fn layer_norm_dual<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Dual<T>> {
    let (y, cache) = layer_norm(x, gamma, beta, eps)?;
    let gamma = gamma.clone();
    Ok(Dual::new(y, move |dy| {
        let (dx, dg, db) = layer_norm_backward(&cache, &gamma, dy)?;
        Ok(vec![dx, dg, db])
    }))
}

// ---------------------------------------------------------------------------
// GELU (exact Gaussian CDF form) and tanh
// ---------------------------------------------------------------------------

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

/// `d/dx [x·Φ(x)] = Φ(x) + x·φ(x)`
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(1.0 / (2.0 * PI).sqrt());
    cdf + x * pdf
}

pub fn gelu_tensor<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    finite(x.map(gelu), "gelu")
}

pub fn gelu_dual<T: Scalar>(x: &Tensor<T>) -> Result<Dual<T>> {
    let y = gelu_tensor(x)?;
    let x = x.clone();
    Ok(Dual::new(y, move |dy| {
        let mut dx = x.map(gelu_grad);
        for (d, &g) in dx.data_mut().iter_mut().zip(dy.data()) {
            *d *= g;
        }
        Ok(vec![dx])
    }))
}

pub fn tanh_dual<T: Scalar>(x: &Tensor<T>) -> Result<Dual<T>> {
    let y = finite(x.map(T::tanh), "tanh")?;
    let saved = y.clone();
    Ok(Dual::new(y, move |dy| {
        let mut dx = saved.map(|t| T::one() - t * t);
        for (d, &g) in dx.data_mut().iter_mut().zip(dy.data()) {
            *d *= g;
        }
        Ok(vec![dx])
    }))
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood over the batch, plus `d loss / d logits`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (batch, classes) = logits.dims2()?;
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    logits.check_finite("cross_entropy logits")?;
    let inv_b = T::one() / T::of(batch as f64);
    let mut loss = T::zero();
    let mut grad = logits.clone();
    for (r, &label) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[label];
        softmax_row(row);
        row[label] -= T::one();
        for g in row.iter_mut() {
            *g *= inv_b;
        }
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy loss".into()));
    }
    Ok((loss, grad))
}

/// [`cross_entropy`] as a [`Dual`] whose output has shape `[1]`.
pub fn cross_entropy_dual<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Dual<T>> {
    let (loss, grad) = cross_entropy(logits, labels)?;
    Ok(Dual::new(Tensor::new(vec![1], vec![loss])?, move |dl| {
        let mut g = grad.clone();
        g.scale(dl.data()[0]);
        Ok(vec![g])
    }))
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

/// Identifies one dropout site at one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub tensor_id: u64,
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (`0` or `1/(1-p)`) needed by the backward pass.
pub fn dropout<T: Scalar>(x: &[T], p: f64, key: DropoutKey) -> (Vec<T>, Vec<T>) {
    if p <= 0.0 {
        return (x.to_vec(), vec![T::one(); x.len()]);
    }
    let mut rng = rng::stream(key.seed, &[rng::tag("dropout"), key.step, key.tensor_id]);
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let y = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (y, mask)
}
