//! Encoder layer removal.
//!
//! Layer 0 sits next to the embeddings and layer `L−1` next to the pooler.
//! "Top" removes the layers nearest the output, "bottom" the layers nearest
//! the input, and "middle" one contiguous block so that `ceil((L−k)/2)` bottom
//! layers and `floor((L−k)/2)` top layers survive.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_count, ModelConfig, ModelWeights};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Top,
    Middle,
    Bottom,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Top, Strategy::Middle, Strategy::Bottom];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Top => "top",
            Strategy::Middle => "middle",
            Strategy::Bottom => "bottom",
        }
    }

    /// Capitalized form used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            Strategy::Top => "Top",
            Strategy::Middle => "Middle",
            Strategy::Bottom => "Bottom",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "top" => Ok(Strategy::Top),
            "middle" => Ok(Strategy::Middle),
            "bottom" => Ok(Strategy::Bottom),
            other => Err(Error::PruneSpec(format!(
                "unknown strategy {other:?} (expected top, middle or bottom)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PruneSpec {
    pub strategy: Strategy,
    /// Number of layers to remove.
    pub k: usize,
}

impl PruneSpec {
    pub fn new(strategy: Strategy, k: usize) -> Self {
        Self { strategy, k }
    }

    pub fn check(&self, num_layers: usize) -> Result<()> {
        if self.k < 1 || self.k + 1 > num_layers {
            return Err(Error::PruneSpec(format!(
                "k = {} is out of range: need 1 <= k <= L-1 = {} for a {num_layers}-layer model",
                self.k,
                num_layers.saturating_sub(1)
            )));
        }
        Ok(())
    }

    /// Table label, e.g. `"Middle 6"`.
    pub fn label(&self) -> String {
        format!("{} {}", self.strategy.title(), self.k)
    }
}

impl fmt::Display for PruneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.strategy.name(), self.k)
    }
}

/// Accepts `top6`, `top-6`, `top:6`, `top 6` and capitalized forms.
impl FromStr for PruneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let split = s
            .find(|c: char| c.is_ascii_digit())
            .ok_or_else(|| Error::PruneSpec(format!("{s:?} has no layer count")))?;
        let strategy = s[..split].trim_end_matches([' ', '-', ':', '_']).parse()?;
        let k = s[split..]
            .parse()
            .map_err(|_| Error::PruneSpec(format!("bad layer count in {s:?}")))?;
        Ok(Self { strategy, k })
    }
}

/// Provenance of one pruning step, stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub source: String,
    pub spec: PruneSpec,
    /// Depth of the model the spec was applied to.
    pub source_layers: usize,
    /// Retained indices into the source model's layers, ascending.
    pub retained: Vec<usize>,
    /// Unix seconds; callers pass a fixed value for reproducible files.
    pub timestamp: u64,
}

/// Sorted indices of the layers that survive `spec` on an `num_layers`-deep model.
pub fn retained_indices(num_layers: usize, spec: PruneSpec) -> Result<Vec<usize>> {
    spec.check(num_layers)?;
    let keep = num_layers - spec.k;
    Ok(match spec.strategy {
        Strategy::Top => (0..keep).collect(),
        Strategy::Bottom => (spec.k..num_layers).collect(),
        Strategy::Middle => {
            let bottom = keep.div_ceil(2);
            let top = keep / 2;
            (0..bottom).chain(num_layers - top..num_layers).collect()
        }
    })
}

/// Layer indices of the original (unpruned) model retained after applying
/// every record in order.
pub fn original_indices(records: &[PruneRecord]) -> Option<Vec<usize>> {
    let first = records.first()?;
    let mut current: Vec<usize> = (0..first.source_layers).collect();
    for r in records {
        if r.source_layers != current.len() {
            return None;
        }
        current = r.retained.iter().map(|&i| current[i]).collect();
    }
    Some(current)
}

/// Removes layers per `spec`, copying retained layers unchanged and
/// renumbering them contiguously. Embeddings, pooler and classifier are kept.
pub fn prune_checkpoint<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    spec: PruneSpec,
    source: &str,
    timestamp: u64,
) -> Result<(ModelWeights<T>, ModelConfig, PruneRecord)> {
    config.validate()?;
    if weights.layers.len() != config.num_layers {
        return Err(Error::Config(format!(
            "weights have {} layers, config says {}",
            weights.layers.len(),
            config.num_layers
        )));
    }
    let retained = retained_indices(config.num_layers, spec)?;
    let pruned = ModelWeights {
        embeddings: weights.embeddings.clone(),
        layers: retained.iter().map(|&i| weights.layers[i].clone()).collect(),
        pooler_weight: weights.pooler_weight.clone(),
        pooler_bias: weights.pooler_bias.clone(),
        classifier_weight: weights.classifier_weight.clone(),
        classifier_bias: weights.classifier_bias.clone(),
    };
    let new_config = config.clone().with_layers(retained.len());
    let record = PruneRecord {
        source: source.to_string(),
        spec,
        source_layers: config.num_layers,
        retained,
        timestamp,
    };
    Ok((pruned, new_config, record))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub layers_before: usize,
    pub layers_after: usize,
    pub layers_removed: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub encoder_param_reduction_pct: f64,
    pub total_param_reduction_pct: f64,
}

pub fn size_report(before: &ModelConfig, after: &ModelConfig) -> Result<SizeReport> {
    if !before.same_except_depth(after) {
        return Err(Error::Config("size_report needs configs that differ only in depth".into()));
    }
    if after.num_layers > before.num_layers {
        return Err(Error::Config("pruned model is deeper than its source".into()));
    }
    let (pb, pa) = (param_count(before), param_count(after));
    let removed = before.num_layers - after.num_layers;
    Ok(SizeReport {
        layers_before: before.num_layers,
        layers_after: after.num_layers,
        layers_removed: removed,
        params_before: pb.total,
        params_after: pa.total,
        encoder_param_reduction_pct: 100.0 * removed as f64 / before.num_layers as f64,
        total_param_reduction_pct: 100.0 * (pb.total - pa.total) as f64 / pb.total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_scratch;

    fn spec(s: Strategy, k: usize) -> PruneSpec {
        PruneSpec::new(s, k)
    }

    #[test]
    fn twelve_layer_table() {
        use Strategy::*;
        let cases: [(Strategy, usize, &[usize]); 8] = [
            (Top, 6, &[0, 1, 2, 3, 4, 5]),
            (Top, 10, &[0, 1]),
            (Middle, 6, &[0, 1, 2, 9, 10, 11]),
            (Middle, 10, &[0, 11]),
            (Bottom, 6, &[6, 7, 8, 9, 10, 11]),
            (Bottom, 10, &[10, 11]),
            (Middle, 7, &[0, 1, 2, 10, 11]),
            (Top, 1, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]),
        ];
        for (s, k, want) in cases {
            assert_eq!(retained_indices(12, spec(s, k)).unwrap(), want, "{s:?} {k}");
        }
        // odd leftover: the extra layer stays at the bottom
        assert_eq!(retained_indices(12, spec(Middle, 5)).unwrap(), [0, 1, 2, 3, 9, 10, 11]);
    }

    #[test]
    fn k_out_of_range() {
        for k in [0, 12, 13] {
            let e = retained_indices(12, spec(Strategy::Top, k)).unwrap_err();
            assert!(e.to_string().contains("1 <= k <= L-1"), "{e}");
        }
        assert!(retained_indices(1, spec(Strategy::Bottom, 1)).is_err());
    }

    #[test]
    fn parse_specs() {
        for s in ["top6", "Top 6", "top-6", "top:6"] {
            assert_eq!(s.parse::<PruneSpec>().unwrap(), spec(Strategy::Top, 6));
        }
        assert_eq!("middle10".parse::<PruneSpec>().unwrap(), spec(Strategy::Middle, 10));
        assert!("sideways3".parse::<PruneSpec>().is_err());
        assert!("top".parse::<PruneSpec>().is_err());
        assert_eq!(spec(Strategy::Middle, 6).to_string(), "middle 6");
        assert_eq!(spec(Strategy::Bottom, 10).label(), "Bottom 10");
    }

    #[test]
    fn renumbering() {
        let cfg = ModelConfig::tiny().with_layers(4);
        let w = init_scratch::<f32>(&cfg, 3).unwrap();
        let (p, pc, rec) = prune_checkpoint(&w, &cfg, spec(Strategy::Bottom, 2), "src", 0).unwrap();
        assert_eq!(pc.num_layers, 2);
        assert!(p.layers[0].bit_eq(&w.layers[2]));
        assert!(p.layers[1].bit_eq(&w.layers[3]));
        assert!(p.embeddings.token.bit_eq(&w.embeddings.token));
        assert!(p.pooler_weight.bit_eq(&w.pooler_weight));
        assert_eq!(rec.retained, [2, 3]);
        assert_eq!(rec.source_layers, 4);
    }

    #[test]
    fn original_index_composition() {
        let cfg = ModelConfig::tiny().with_layers(12);
        let w = init_scratch::<f32>(&cfg, 3).unwrap();
        let (w1, c1, r1) = prune_checkpoint(&w, &cfg, spec(Strategy::Middle, 6), "a", 0).unwrap();
        let (_, _, r2) = prune_checkpoint(&w1, &c1, spec(Strategy::Top, 2), "b", 0).unwrap();
        assert_eq!(original_indices(&[r1.clone()]).unwrap(), [0, 1, 2, 9, 10, 11]);
        assert_eq!(original_indices(&[r1, r2]).unwrap(), [0, 1, 2, 9]);
        assert_eq!(original_indices(&[]), None);
    }

    #[test]
    fn size_reports() {
        let base = ModelConfig::base(30522, 3);
        let r = size_report(&base, &base.clone().with_layers(6)).unwrap();
        assert_eq!(format!("{:.2}", r.encoder_param_reduction_pct), "50.00");
        let r = size_report(&base, &base.clone().with_layers(2)).unwrap();
        assert_eq!(format!("{:.2}", r.encoder_param_reduction_pct), "83.33");

        let tiny = ModelConfig::tiny().with_layers(12);
        let r = size_report(&tiny, &tiny.clone().with_layers(6)).unwrap();
        // 6 layers × 600 params removed from 416 + 7200 + 72 + 36
        assert!((r.total_param_reduction_pct - 3600.0 / 7724.0 * 100.0).abs() < 1e-12);

        let other = ModelConfig {
            hidden_size: 16,
            ..tiny.clone()
        };
        assert!(size_report(&tiny, &other).is_err());
    }

    mod props {
        use super::*;
        use super::Strategy;
        use proptest::strategy::Strategy as _;
        use proptest::prelude::*;

        fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
            prop_oneof![Just(Strategy::Top), Just(Strategy::Middle), Just(Strategy::Bottom)]
        }

        proptest! {
            #[test]
            fn retained_set_shape((l, k) in (2usize..40).prop_flat_map(|l| (Just(l), 1..l)), s in strategy()) {
                let r = retained_indices(l, spec(s, k)).unwrap();
                prop_assert_eq!(r.len(), l - k);
                prop_assert!(r.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(r.iter().all(|&i| i < l));
                match s {
                    Strategy::Top => prop_assert_eq!(*r.last().unwrap(), l - k - 1),
                    Strategy::Bottom => prop_assert_eq!(r[0], k),
                    Strategy::Middle => {
                        let keep = l - k;
                        let (lo, hi) = (keep.div_ceil(2), keep / 2);
                        prop_assert_eq!(&r[..lo], &(0..lo).collect::<Vec<_>>()[..]);
                        prop_assert_eq!(&r[lo..], &(l - hi..l).collect::<Vec<_>>()[..]);
                    }
                }
            }

            #[test]
            fn equal_k_equal_size((l, k) in (2usize..14).prop_flat_map(|l| (Just(l), 1..l))) {
                let cfg = ModelConfig::tiny().with_layers(l);
                let totals: Vec<usize> = Strategy::ALL
                    .iter()
                    .map(|&s| {
                        let kept = retained_indices(l, spec(s, k)).unwrap().len();
                        param_count(&cfg.clone().with_layers(kept)).total
                    })
                    .collect();
                prop_assert!(totals.windows(2).all(|w| w[0] == w[1]));
            }
        }
    }
}
