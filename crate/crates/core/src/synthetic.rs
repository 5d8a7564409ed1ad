//! Seeded 4-class marker task: each example is a run of random filler words
//! with exactly one marker word inserted; the label is which marker.

use rand::Rng;

use crate::data::{Example, LabeledDataset, Split};
use crate::error::Result;
use crate::rng;
use crate::tokenizer::Vocab;

pub const MARKERS: [&str; 4] = ["m0", "m1", "m2", "m3"];

#[derive(Clone, Debug, PartialEq)]
pub struct MarkerTask {
    pub num_fillers: usize,
    /// Word count range, marker included.
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for MarkerTask {
    fn default() -> Self {
        Self {
            num_fillers: 40,
            min_words: 4,
            max_words: 12,
        }
    }
}

impl MarkerTask {
    fn filler(i: usize) -> String {
        format!("w{i}")
    }

    /// Specials, fillers, then markers.
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::with_specials(
            (0..self.num_fillers)
                .map(Self::filler)
                .chain(MARKERS.iter().map(|m| m.to_string())),
        )
    }

    pub fn generate(&self, n: usize, seed: u64, split: Split) -> LabeledDataset {
        let mut rng = rng::stream(seed, &[rng::tag("marker-task"), split as u64]);
        let examples = (0..n)
            .map(|_| {
                let len = rng.random_range(self.min_words..=self.max_words);
                let label = rng.random_range(0..MARKERS.len());
                let at = rng.random_range(0..len);
                let words: Vec<String> = (0..len)
                    .map(|i| {
                        if i == at {
                            MARKERS[label].to_string()
                        } else {
                            Self::filler(rng.random_range(0..self.num_fillers))
                        }
                    })
                    .collect();
                Example {
                    text: words.join(" "),
                    label,
                }
            })
            .collect();
        LabeledDataset {
            examples,
            label_names: MARKERS.iter().map(|m| m.to_string()).collect(),
            split,
        }
    }
}
