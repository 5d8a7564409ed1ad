//! Weight containers and their canonical tensor names.
//!
//! Linear weights are stored `out_features × in_features`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings<T> {
    pub token: Tensor<T>,
    pub position: Tensor<T>,
    pub token_type: Tensor<T>,
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
}

/// The 16 tensors of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerWeights<T> {
    pub q_weight: Tensor<T>,
    pub q_bias: Tensor<T>,
    pub k_weight: Tensor<T>,
    pub k_bias: Tensor<T>,
    pub v_weight: Tensor<T>,
    pub v_bias: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
    pub attn_ln_gamma: Tensor<T>,
    pub attn_ln_beta: Tensor<T>,
    pub up_weight: Tensor<T>,
    pub up_bias: Tensor<T>,
    pub down_weight: Tensor<T>,
    pub down_bias: Tensor<T>,
    pub ffn_ln_gamma: Tensor<T>,
    pub ffn_ln_beta: Tensor<T>,
}

pub const LAYER_TENSOR_SUFFIXES: [&str; 16] = [
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "attn.ln.gamma",
    "attn.ln.beta",
    "ffn.up.weight",
    "ffn.up.bias",
    "ffn.down.weight",
    "ffn.down.bias",
    "ffn.ln.gamma",
    "ffn.ln.beta",
];

impl<T: Scalar> EncoderLayerWeights<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (h, i) = (config.hidden_size, config.intermediate_size);
        let z = |s: &[usize]| Tensor::zeros(s);
        Self {
            q_weight: z(&[h, h]),
            q_bias: z(&[h]),
            k_weight: z(&[h, h]),
            k_bias: z(&[h]),
            v_weight: z(&[h, h]),
            v_bias: z(&[h]),
            out_weight: z(&[h, h]),
            out_bias: z(&[h]),
            attn_ln_gamma: z(&[h]),
            attn_ln_beta: z(&[h]),
            up_weight: z(&[i, h]),
            up_bias: z(&[i]),
            down_weight: z(&[h, i]),
            down_bias: z(&[h]),
            ffn_ln_gamma: z(&[h]),
            ffn_ln_beta: z(&[h]),
        }
    }

    /// Tensors paired with their name suffixes, in canonical order.
    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 16] {
        let s = LAYER_TENSOR_SUFFIXES;
        [
            (s[0], &self.q_weight),
            (s[1], &self.q_bias),
            (s[2], &self.k_weight),
            (s[3], &self.k_bias),
            (s[4], &self.v_weight),
            (s[5], &self.v_bias),
            (s[6], &self.out_weight),
            (s[7], &self.out_bias),
            (s[8], &self.attn_ln_gamma),
            (s[9], &self.attn_ln_beta),
            (s[10], &self.up_weight),
            (s[11], &self.up_bias),
            (s[12], &self.down_weight),
            (s[13], &self.down_bias),
            (s[14], &self.ffn_ln_gamma),
            (s[15], &self.ffn_ln_beta),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 16] {
        let s = LAYER_TENSOR_SUFFIXES;
        [
            (s[0], &mut self.q_weight),
            (s[1], &mut self.q_bias),
            (s[2], &mut self.k_weight),
            (s[3], &mut self.k_bias),
            (s[4], &mut self.v_weight),
            (s[5], &mut self.v_bias),
            (s[6], &mut self.out_weight),
            (s[7], &mut self.out_bias),
            (s[8], &mut self.attn_ln_gamma),
            (s[9], &mut self.attn_ln_beta),
            (s[10], &mut self.up_weight),
            (s[11], &mut self.up_bias),
            (s[12], &mut self.down_weight),
            (s[13], &mut self.down_bias),
            (s[14], &mut self.ffn_ln_gamma),
            (s[15], &mut self.ffn_ln_beta),
        ]
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .all(|((_, a), (_, b))| a.bit_eq(b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub embeddings: Embeddings<T>,
    pub layers: Vec<EncoderLayerWeights<T>>,
    pub pooler_weight: Tensor<T>,
    pub pooler_bias: Tensor<T>,
    pub classifier_weight: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

pub fn layer_tensor_name(layer: usize, suffix: &str) -> String {
    format!("encoder.layer.{layer}.{suffix}")
}

/// Canonical `(name, shape)` list for a config, in payload order.
pub fn expected_tensors(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    ModelWeights::<f32>::zeros(config)
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect()
}

impl<T: Scalar> ModelWeights<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_size;
        Self {
            embeddings: Embeddings {
                token: Tensor::zeros(&[config.vocab_size, h]),
                position: Tensor::zeros(&[config.max_positions, h]),
                token_type: Tensor::zeros(&[config.type_vocab_size, h]),
                ln_gamma: Tensor::zeros(&[h]),
                ln_beta: Tensor::zeros(&[h]),
            },
            layers: (0..config.num_layers)
                .map(|_| EncoderLayerWeights::zeros(config))
                .collect(),
            pooler_weight: Tensor::zeros(&[h, h]),
            pooler_bias: Tensor::zeros(&[h]),
            classifier_weight: Tensor::zeros(&[config.num_classes, h]),
            classifier_bias: Tensor::zeros(&[config.num_classes]),
        }
    }

    /// Every tensor with its canonical name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let e = &self.embeddings;
        let mut out = vec![
            ("embeddings.token".to_string(), &e.token),
            ("embeddings.position".to_string(), &e.position),
            ("embeddings.type".to_string(), &e.token_type),
            ("embeddings.ln.gamma".to_string(), &e.ln_gamma),
            ("embeddings.ln.beta".to_string(), &e.ln_beta),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .tensors()
                    .into_iter()
                    .map(|(s, t)| (layer_tensor_name(i, s), t)),
            );
        }
        out.extend([
            ("pooler.weight".to_string(), &self.pooler_weight),
            ("pooler.bias".to_string(), &self.pooler_bias),
            ("classifier.weight".to_string(), &self.classifier_weight),
            ("classifier.bias".to_string(), &self.classifier_bias),
        ]);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let e = &mut self.embeddings;
        let mut out = vec![
            ("embeddings.token".to_string(), &mut e.token),
            ("embeddings.position".to_string(), &mut e.position),
            ("embeddings.type".to_string(), &mut e.token_type),
            ("embeddings.ln.gamma".to_string(), &mut e.ln_gamma),
            ("embeddings.ln.beta".to_string(), &mut e.ln_beta),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .tensors_mut()
                    .into_iter()
                    .map(|(s, t)| (layer_tensor_name(i, s), t)),
            );
        }
        out.extend([
            ("pooler.weight".to_string(), &mut self.pooler_weight),
            ("pooler.bias".to_string(), &mut self.pooler_bias),
            ("classifier.weight".to_string(), &mut self.classifier_weight),
            ("classifier.bias".to_string(), &mut self.classifier_bias),
        ]);
        out
    }

    pub fn num_elements(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Builds weights for `config` from a name → tensor map. Every expected
    /// name must be present with the expected shape; extra names are an error.
    pub fn from_named(config: &ModelConfig, mut named: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut weights = Self::zeros(config);
        for (name, slot) in weights.named_tensors_mut() {
            let t = named
                .remove(&name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Shape(format!("unexpected tensor {extra}")));
        }
        Ok(weights)
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let e = &self.embeddings;
        ModelWeights {
            embeddings: Embeddings {
                token: e.token.cast(),
                position: e.position.cast(),
                token_type: e.token_type.cast(),
                ln_gamma: e.ln_gamma.cast(),
                ln_beta: e.ln_beta.cast(),
            },
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayerWeights {
                    q_weight: l.q_weight.cast(),
                    q_bias: l.q_bias.cast(),
                    k_weight: l.k_weight.cast(),
                    k_bias: l.k_bias.cast(),
                    v_weight: l.v_weight.cast(),
                    v_bias: l.v_bias.cast(),
                    out_weight: l.out_weight.cast(),
                    out_bias: l.out_bias.cast(),
                    attn_ln_gamma: l.attn_ln_gamma.cast(),
                    attn_ln_beta: l.attn_ln_beta.cast(),
                    up_weight: l.up_weight.cast(),
                    up_bias: l.up_bias.cast(),
                    down_weight: l.down_weight.cast(),
                    down_bias: l.down_bias.cast(),
                    ffn_ln_gamma: l.ffn_ln_gamma.cast(),
                    ffn_ln_beta: l.ffn_ln_beta.cast(),
                })
                .collect(),
            pooler_weight: self.pooler_weight.cast(),
            pooler_bias: self.pooler_bias.cast(),
            classifier_weight: self.classifier_weight.cast(),
            classifier_bias: self.classifier_bias.cast(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.named_tensors(), other.named_tensors());
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    /// Replaces the classification head with a freshly initialized one.
    pub fn reset_classifier(&mut self, num_classes: usize, seed: u64) {
        let h = self.pooler_bias.len();
        self.classifier_weight = Tensor::zeros(&[num_classes, h]);
        self.classifier_bias = Tensor::zeros(&[num_classes]);
        fill_trunc_normal(&mut self.classifier_weight, seed, "classifier.weight");
    }
}

/// Truncated normal(0, [`INIT_STD`]) with resampling outside ±2σ.
fn fill_trunc_normal<T: Scalar>(t: &mut Tensor<T>, seed: u64, name: &str) {
    let mut rng = rng::stream(seed, &[rng::tag("init"), rng::tag(name)]);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for x in t.data_mut() {
        let v = loop {
            let v: f64 = normal.sample(&mut rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        };
        *x = T::of(v);
    }
}

fn init_kind(name: &str) -> InitKind {
    if name.ends_with(".gamma") {
        InitKind::One
    } else if name.ends_with(".bias") || name.ends_with(".beta") {
        InitKind::Zero
    } else {
        InitKind::Normal
    }
}

enum InitKind {
    Normal,
    Zero,
    One,
}

/// Random initialization: weight matrices and embeddings from a truncated
/// normal, biases zero, layer-norm gain one and shift zero.
pub fn init_scratch<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelWeights<T>> {
    config.validate()?;
    let mut w = ModelWeights::zeros(config);
    for (name, t) in w.named_tensors_mut() {
        match init_kind(&name) {
            InitKind::Normal => fill_trunc_normal(t, seed, &name),
            InitKind::Zero => t.fill(T::zero()),
            InitKind::One => t.fill(T::one()),
        }
    }
    Ok(w)
}

/// Broad random weights for gradient checking: with the small production
/// init most attention gradients sit near the finite-difference noise floor.
pub fn init_for_gradcheck<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelWeights<T>> {
    config.validate()?;
    let mut w = ModelWeights::zeros(config);
    for (name, t) in w.named_tensors_mut() {
        let mut rng = rng::stream(seed, &[rng::tag("gradcheck-init"), rng::tag(&name)]);
        let (center, spread) = match init_kind(&name) {
            InitKind::Normal => (0.0, 0.35),
            InitKind::Zero => (0.0, 0.07),
            InitKind::One => (1.0, 0.14),
        };
        for x in t.data_mut() {
            *x = T::of(center + rng.random_range(-spread..spread));
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_names() {
        let w = ModelWeights::<f32>::zeros(&ModelConfig::tiny());
        let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 5 + 2 * 16 + 4);
        assert_eq!(names[0], "embeddings.token");
        assert!(names.contains(&"encoder.layer.1.attn.q.weight".to_string()));
        assert_eq!(names.last().unwrap(), "classifier.bias");
    }

    #[test]
    fn init_rules() {
        let cfg = ModelConfig::tiny();
        let a = init_scratch::<f32>(&cfg, 11).unwrap();
        let b = init_scratch::<f32>(&cfg, 11).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_scratch::<f32>(&cfg, 12).unwrap();
        assert!(!a.bit_eq(&c));
        for (name, t) in a.named_tensors() {
            if name.ends_with(".gamma") {
                assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            } else {
                assert!(t.data().iter().all(|&x| x.abs() <= 0.04), "{name}");
            }
        }
    }

    #[test]
    fn token_embedding_mean_is_near_zero() {
        let cfg = ModelConfig {
            vocab_size: 2000,
            ..ModelConfig::tiny()
        };
        let w = init_scratch::<f64>(&cfg, 5).unwrap();
        let tok = &w.embeddings.token;
        assert!(tok.len() >= 10_000);
        let mean = tok.sum() / tok.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn from_named_round_trip_and_errors() {
        let cfg = ModelConfig::tiny();
        let w = init_scratch::<f32>(&cfg, 1).unwrap();
        let map: BTreeMap<String, Tensor<f32>> = w
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert!(ModelWeights::from_named(&cfg, map.clone()).unwrap().bit_eq(&w));

        let mut missing = map.clone();
        missing.remove("pooler.weight");
        let err = ModelWeights::from_named(&cfg, missing).unwrap_err();
        assert!(err.to_string().contains("pooler.weight"));

        let mut wrong = map;
        wrong.insert("pooler.bias".into(), Tensor::zeros(&[3]));
        assert!(ModelWeights::from_named(&cfg, wrong).is_err());
    }

    #[test]
    fn reset_classifier_changes_only_the_head() {
        let cfg = ModelConfig::tiny();
        let mut w = init_scratch::<f32>(&cfg, 1).unwrap();
        let before = w.clone();
        w.reset_classifier(3, 99);
        assert_eq!(w.classifier_weight.shape(), &[3, 8]);
        assert!(w.embeddings.token.bit_eq(&before.embeddings.token));
        assert!(w.pooler_weight.bit_eq(&before.pooler_weight));
    }
}
