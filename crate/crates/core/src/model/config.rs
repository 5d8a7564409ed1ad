use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a BERT-style sequence classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    pub num_classes: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub dropout_prob: f64,
}

fn default_type_vocab() -> usize {
    2
}

fn default_eps() -> f64 {
    1e-12
}

impl ModelConfig {
    /// 12-layer, 768-wide encoder.
    pub fn base(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            intermediate_size: 3072,
            vocab_size,
            max_positions: 512,
            type_vocab_size: 2,
            num_classes,
            layer_norm_eps: 1e-12,
            dropout_prob: 0.0,
        }
    }

    /// 6-layer variant of [`ModelConfig::base`].
    pub fn small(vocab_size: usize, num_classes: usize) -> Self {
        Self::base(vocab_size, num_classes).with_layers(6)
    }

    /// 2-layer variant of [`ModelConfig::base`].
    pub fn smaller(vocab_size: usize, num_classes: usize) -> Self {
        Self::base(vocab_size, num_classes).with_layers(2)
    }

    /// The smallest useful configuration; used throughout the tests.
    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            intermediate_size: 16,
            vocab_size: 32,
            max_positions: 16,
            type_vocab_size: 2,
            num_classes: 4,
            layer_norm_eps: 1e-12,
            dropout_prob: 0.0,
        }
    }

    pub fn with_layers(mut self, num_layers: usize) -> Self {
        self.num_layers = num_layers;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("type_vocab_size", self.type_vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config("dropout_prob must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// True when the two configs differ at most in depth.
    pub fn same_except_depth(&self, other: &Self) -> bool {
        Self {
            num_layers: 0,
            ..self.clone()
        } == Self {
            num_layers: 0,
            ..other.clone()
        }
    }
}

/// Parameter counts by model section.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub embeddings: usize,
    pub per_layer: usize,
    pub encoder_total: usize,
    pub pooler: usize,
    pub classifier: usize,
    pub total: usize,
}

pub fn param_count(config: &ModelConfig) -> ParamCount {
    let (v, p, t) = (config.vocab_size, config.max_positions, config.type_vocab_size);
    let (h, i, c) = (config.hidden_size, config.intermediate_size, config.num_classes);

    let embeddings = v * h + p * h + t * h + 2 * h;
    let attention = 4 * (h * h + h) + 2 * h;
    let ffn = (h * i + i) + (i * h + h) + 2 * h;
    let per_layer = attention + ffn;
    let encoder_total = config.num_layers * per_layer;
    let pooler = h * h + h;
    let classifier = c * h + c;
    ParamCount {
        embeddings,
        per_layer,
        encoder_total,
        pooler,
        classifier,
        total: embeddings + encoder_total + pooler + classifier,
    }
}
