//! Encoder forward pass with a recorded trace, and the matching backward pass.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::{EncoderLayerWeights, ModelWeights};
use crate::ops::{self, DropoutKey, LayerNormCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive score for masked key positions.
pub const MASK_FILL: f64 = -1e9;

/// Seed and step that key the dropout streams of one training step.
#[derive(Clone, Copy, Debug)]
pub struct DropoutStep {
    pub seed: u64,
    pub step: u64,
}

struct LayerTrace<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities, `[batch, head, query, key]`.
    probs: Vec<T>,
    ctx: Vec<T>,
    attn_drop: Vec<T>,
    ln1: LayerNormCache<T>,
    h1: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
    ffn_drop: Vec<T>,
    ln2: LayerNormCache<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace<T> {
    batch: usize,
    seq: usize,
    emb_ln: LayerNormCache<T>,
    emb_drop: Vec<T>,
    layers: Vec<LayerTrace<T>>,
    final_hidden: Vec<T>,
    cls: Vec<T>,
    pooled: Vec<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Attention probabilities of `layer`, laid out `[batch, head, query, key]`.
    pub fn attention_probs(&self, layer: usize) -> &[T] {
        &self.layers[layer].probs
    }

    /// Final encoder hidden states, `[batch·seq, hidden]`.
    pub fn final_hidden(&self) -> &[T] {
        &self.final_hidden
    }

    /// Pooler output, `[batch, hidden]`.
    pub fn pooled(&self) -> &[T] {
        &self.pooled
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.batch, self.seq)
    }
}

fn check_inputs<T: Scalar>(weights: &ModelWeights<T>, config: &ModelConfig, batch: &Batch) -> Result<()> {
    config.validate()?;
    if weights.layers.len() != config.num_layers {
        return Err(Error::Config(format!(
            "weights have {} layers, config says {}",
            weights.layers.len(),
            config.num_layers
        )));
    }
    let (b, s) = (batch.batch_size, batch.seq_len);
    if b == 0 || s == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if batch.input_ids.len() != b * s || batch.attention_mask.len() != b * s {
        return Err(Error::Input(format!("batch arrays do not match {b}x{s}")));
    }
    if s > config.max_positions {
        return Err(Error::Input(format!(
            "sequence length {s} exceeds max_positions {}",
            config.max_positions
        )));
    }
    if let Some(&id) = batch.input_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {id} out of range for vocab of {}",
            config.vocab_size
        )));
    }
    for (r, row) in batch.attention_mask.chunks(s).enumerate() {
        if row.iter().any(|&m| m > 1) {
            return Err(Error::Input(format!("attention mask row {r} is not 0/1")));
        }
        if row.iter().all(|&m| m == 0) {
            return Err(Error::Input(format!("attention mask row {r} is all zero")));
        }
    }
    Ok(())
}

fn drop_site<T: Scalar>(x: Vec<T>, p: f64, dropout: Option<DropoutStep>, site: u64) -> (Vec<T>, Vec<T>) {
    match dropout {
        Some(d) if p > 0.0 => ops::dropout(
            &x,
            p,
            DropoutKey {
                seed: d.seed,
                step: d.step,
                tensor_id: site,
            },
        ),
        _ => (x, Vec::new()),
    }
}

fn apply_mask<T: Scalar>(grad: &mut [T], mask: &[T]) {
    if !mask.is_empty() {
        for (g, &m) in grad.iter_mut().zip(mask) {
            *g *= m;
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

struct Dims {
    batch: usize,
    seq: usize,
    hidden: usize,
    heads: usize,
    head_dim: usize,
}

fn attention_forward<T: Scalar>(d: &Dims, q: &[T], k: &[T], v: &[T], key_bias: &[T]) -> (Vec<T>, Vec<T>) {
    let (s, h, hd) = (d.seq, d.hidden, d.head_dim);
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut probs = vec![T::zero(); d.batch * d.heads * s * s];
    let mut ctx = vec![T::zero(); d.batch * s * h];
    for b in 0..d.batch {
        for a in 0..d.heads {
            let col = a * hd;
            let p_base = (b * d.heads + a) * s * s;
            for i in 0..s {
                let qi = &q[(b * s + i) * h + col..][..hd];
                let row = &mut probs[p_base + i * s..p_base + (i + 1) * s];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[(b * s + j) * h + col..][..hd];
                    let dot: T = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                    *r = dot * scale + key_bias[b * s + j];
                }
                ops::softmax_row(row);
                let out = &mut ctx[(b * s + i) * h + col..][..hd];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &v[(b * s + j) * h + col..][..hd];
                    for (o, &x) in out.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (probs, ctx)
}

/// Returns `(dq, dk, dv)`.
fn attention_backward<T: Scalar>(
    d: &Dims,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dctx: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (s, h, hd) = (d.seq, d.hidden, d.head_dim);
    let scale = T::one() / T::of(hd as f64).sqrt();
    let n = d.batch * s * h;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let mut dp = vec![T::zero(); s];
    let mut ds = vec![T::zero(); s];
    for b in 0..d.batch {
        for a in 0..d.heads {
            let col = a * hd;
            let p_base = (b * d.heads + a) * s * s;
            for i in 0..s {
                let p_row = &probs[p_base + i * s..p_base + (i + 1) * s];
                let g = &dctx[(b * s + i) * h + col..][..hd];
                for j in 0..s {
                    let off = (b * s + j) * h + col;
                    let vj = &v[off..off + hd];
                    dp[j] = g.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                    for (dvj, &gt) in dv[off..off + hd].iter_mut().zip(g) {
                        *dvj += p_row[j] * gt;
                    }
                }
                ops::softmax_row_backward(p_row, &dp, &mut ds);
                let qi_off = (b * s + i) * h + col;
                for j in 0..s {
                    let w = ds[j] * scale;
                    let off = (b * s + j) * h + col;
                    for t in 0..hd {
                        dq[qi_off + t] += w * k[off + t];
                        dk[off + t] += w * q[qi_off + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn layer_forward<T: Scalar>(
    d: &Dims,
    w: &EncoderLayerWeights<T>,
    config: &ModelConfig,
    input: Vec<T>,
    key_bias: &[T],
    dropout: Option<DropoutStep>,
    site: u64,
) -> (Vec<T>, LayerTrace<T>) {
    let n = d.batch * d.seq;
    let eps = T::of(config.layer_norm_eps);
    let p = config.dropout_prob;

    let q = ops::linear(&input, n, &w.q_weight, &w.q_bias);
    let k = ops::linear(&input, n, &w.k_weight, &w.k_bias);
    let v = ops::linear(&input, n, &w.v_weight, &w.v_bias);
    let (probs, ctx) = attention_forward(d, &q, &k, &v, key_bias);
    let attn_out = ops::linear(&ctx, n, &w.out_weight, &w.out_bias);
    let (mut r1, attn_drop) = drop_site(attn_out, p, dropout, site);
    add_into(&mut r1, &input);
    let (h1, ln1) = ops::layer_norm_slice(&r1, w.attn_ln_gamma.data(), w.attn_ln_beta.data(), eps);

    let up = ops::linear(&h1, n, &w.up_weight, &w.up_bias);
    let act: Vec<T> = up.iter().map(|&x| ops::gelu(x)).collect();
    let down = ops::linear(&act, n, &w.down_weight, &w.down_bias);
    let (mut r2, ffn_drop) = drop_site(down, p, dropout, site + 1);
    add_into(&mut r2, &h1);
    let (out, ln2) = ops::layer_norm_slice(&r2, w.ffn_ln_gamma.data(), w.ffn_ln_beta.data(), eps);

    let trace = LayerTrace {
        input,
        q,
        k,
        v,
        probs,
        ctx,
        attn_drop,
        ln1,
        h1,
        up,
        act,
        ffn_drop,
        ln2,
    };
    (out, trace)
}

/// Runs the encoder and records intermediate values.
pub fn forward_traced<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    batch: &Batch,
    dropout: Option<DropoutStep>,
) -> Result<ForwardTrace<T>> {
    check_inputs(weights, config, batch)?;
    let h = config.hidden_size;
    let d = Dims {
        batch: batch.batch_size,
        seq: batch.seq_len,
        hidden: h,
        heads: config.num_heads,
        head_dim: config.head_dim(),
    };
    let n = d.batch * d.seq;
    let e = &weights.embeddings;

    let mut emb = vec![T::zero(); n * h];
    for (r, &id) in batch.input_ids.iter().enumerate() {
        let pos = r % d.seq;
        let out = &mut emb[r * h..(r + 1) * h];
        for (((o, &t), &p), &ty) in out
            .iter_mut()
            .zip(e.token.row(id))
            .zip(e.position.row(pos))
            .zip(e.token_type.row(0))
        {
            *o = t + p + ty;
        }
    }
    let eps = T::of(config.layer_norm_eps);
    let (x0, emb_ln) = ops::layer_norm_slice(&emb, e.ln_gamma.data(), e.ln_beta.data(), eps);
    let (mut x, emb_drop) = drop_site(x0, config.dropout_prob, dropout, 0);

    let key_bias: Vec<T> = batch
        .attention_mask
        .iter()
        .map(|&m| if m == 1 { T::zero() } else { T::of(MASK_FILL) })
        .collect();

    let mut layers = Vec::with_capacity(weights.layers.len());
    for (l, lw) in weights.layers.iter().enumerate() {
        let (out, trace) = layer_forward(&d, lw, config, x, &key_bias, dropout, 1 + 2 * l as u64);
        layers.push(trace);
        x = out;
    }

    let mut cls = Vec::with_capacity(d.batch * h);
    for b in 0..d.batch {
        cls.extend_from_slice(&x[b * d.seq * h..(b * d.seq + 1) * h]);
    }
    let pooled: Vec<T> = ops::linear(&cls, d.batch, &weights.pooler_weight, &weights.pooler_bias)
        .into_iter()
        .map(T::tanh)
        .collect();
    let logits = ops::linear(&pooled, d.batch, &weights.classifier_weight, &weights.classifier_bias);
    let logits = Tensor::new(vec![d.batch, config.num_classes], logits)?;
    logits.check_finite("logits")?;

    Ok(ForwardTrace {
        batch: d.batch,
        seq: d.seq,
        emb_ln,
        emb_drop,
        layers,
        final_hidden: x,
        cls,
        pooled,
        logits,
    })
}

/// Classification logits, `[batch, num_classes]`. Dropout is never applied.
pub fn forward<T: Scalar>(weights: &ModelWeights<T>, config: &ModelConfig, batch: &Batch) -> Result<Tensor<T>> {
    Ok(forward_traced(weights, config, batch, None)?.logits)
}

/// Mean cross-entropy loss of the batch and its gradient for every tensor.
pub fn backward<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    batch: &Batch,
) -> Result<(T, ModelWeights<T>)> {
    backward_with_dropout(weights, config, batch, None)
}

pub fn backward_with_dropout<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    batch: &Batch,
    dropout: Option<DropoutStep>,
) -> Result<(T, ModelWeights<T>)> {
    let trace = forward_traced(weights, config, batch, dropout)?;
    let (loss, dlogits) = ops::cross_entropy(&trace.logits, &batch.labels)?;
    let grads = backward_from_trace(weights, config, batch, &trace, dlogits.data())?;
    Ok((loss, grads))
}

/// Backpropagates `dlogits` through a recorded forward pass.
pub fn backward_from_trace<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    batch: &Batch,
    trace: &ForwardTrace<T>,
    dlogits: &[T],
) -> Result<ModelWeights<T>> {
    let h = config.hidden_size;
    let d = Dims {
        batch: trace.batch,
        seq: trace.seq,
        hidden: h,
        heads: config.num_heads,
        head_dim: config.head_dim(),
    };
    let n = d.batch * d.seq;
    let mut g = ModelWeights::zeros(config);

    let dpooled = ops::linear_backward(
        &trace.pooled,
        d.batch,
        &weights.classifier_weight,
        dlogits,
        &mut g.classifier_weight,
        &mut g.classifier_bias,
    );
    let dz: Vec<T> = dpooled
        .iter()
        .zip(&trace.pooled)
        .map(|(&gp, &p)| gp * (T::one() - p * p))
        .collect();
    let dcls = ops::linear_backward(
        &trace.cls,
        d.batch,
        &weights.pooler_weight,
        &dz,
        &mut g.pooler_weight,
        &mut g.pooler_bias,
    );

    let mut dx = vec![T::zero(); n * h];
    for b in 0..d.batch {
        dx[b * d.seq * h..(b * d.seq + 1) * h].copy_from_slice(&dcls[b * h..(b + 1) * h]);
    }

    for (l, (lw, lt)) in weights.layers.iter().zip(&trace.layers).enumerate().rev() {
        let lg = &mut g.layers[l];
        let dr2 = ops::layer_norm_backward_slice(
            &lt.ln2,
            lw.ffn_ln_gamma.data(),
            &dx,
            lg.ffn_ln_gamma.data_mut(),
            lg.ffn_ln_beta.data_mut(),
        );
        let mut ddown = dr2.clone();
        apply_mask(&mut ddown, &lt.ffn_drop);
        let dact = ops::linear_backward(&lt.act, n, &lw.down_weight, &ddown, &mut lg.down_weight, &mut lg.down_bias);
        let dup: Vec<T> = dact
            .iter()
            .zip(&lt.up)
            .map(|(&ga, &u)| ga * ops::gelu_grad(u))
            .collect();
        let mut dh1 = ops::linear_backward(&lt.h1, n, &lw.up_weight, &dup, &mut lg.up_weight, &mut lg.up_bias);
        add_into(&mut dh1, &dr2);

        let dr1 = ops::layer_norm_backward_slice(
            &lt.ln1,
            lw.attn_ln_gamma.data(),
            &dh1,
            lg.attn_ln_gamma.data_mut(),
            lg.attn_ln_beta.data_mut(),
        );
        let mut dattn = dr1.clone();
        apply_mask(&mut dattn, &lt.attn_drop);
        let dctx = ops::linear_backward(&lt.ctx, n, &lw.out_weight, &dattn, &mut lg.out_weight, &mut lg.out_bias);
        let (dq, dk, dv) = attention_backward(&d, &lt.q, &lt.k, &lt.v, &lt.probs, &dctx);

        let mut dinput = dr1;
        let dxq = ops::linear_backward(&lt.input, n, &lw.q_weight, &dq, &mut lg.q_weight, &mut lg.q_bias);
        let dxk = ops::linear_backward(&lt.input, n, &lw.k_weight, &dk, &mut lg.k_weight, &mut lg.k_bias);
        let dxv = ops::linear_backward(&lt.input, n, &lw.v_weight, &dv, &mut lg.v_weight, &mut lg.v_bias);
        add_into(&mut dinput, &dxq);
        add_into(&mut dinput, &dxk);
        add_into(&mut dinput, &dxv);
        dx = dinput;
    }

    apply_mask(&mut dx, &trace.emb_drop);
    let ge = &mut g.embeddings;
    let demb = ops::layer_norm_backward_slice(
        &trace.emb_ln,
        weights.embeddings.ln_gamma.data(),
        &dx,
        ge.ln_gamma.data_mut(),
        ge.ln_beta.data_mut(),
    );
    for (r, &id) in batch.input_ids.iter().enumerate() {
        let pos = r % d.seq;
        let src = &demb[r * h..(r + 1) * h];
        add_into(&mut ge.token.data_mut()[id * h..(id + 1) * h], src);
        add_into(&mut ge.position.data_mut()[pos * h..(pos + 1) * h], src);
        add_into(&mut ge.token_type.data_mut()[..h], src);
    }

    for (name, t) in g.named_tensors() {
        t.check_finite(&format!("gradient of {name}"))?;
    }
    Ok(g)
}
