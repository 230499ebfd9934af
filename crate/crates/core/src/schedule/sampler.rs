use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::StageSpec;
use crate::corpus::{Corpus, DatasetKind, Task};
use crate::error::{Error, Result};

/// One sampled training example, as logged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DrawRecord {
    pub step: usize,
    pub stage: String,
    pub phase: String,
    pub dataset: DatasetKind,
    pub task: Task,
    pub index: usize,
}

/// Seeded weighted sampler over the train splits of a stage's datasets.
pub struct MixtureSampler {
    datasets: Vec<DatasetKind>,
    choose: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl MixtureSampler {
    pub fn new(stage: &StageSpec, corpus: &Corpus, seed: u64) -> Result<Self> {
        let entries: Vec<_> = stage.mixture.iter().filter(|m| m.weight > 0.0).collect();
        if entries.is_empty() {
            return Err(Error::Config(format!("stage `{}` has an empty data mixture", stage.name)));
        }
        for m in &entries {
            if corpus.dataset(m.dataset).train.is_empty() {
                return Err(Error::Config(format!(
                    "stage `{}` samples {} but its train split is empty",
                    stage.name,
                    m.dataset.as_str()
                )));
            }
        }
        let choose = WeightedIndex::new(entries.iter().map(|m| m.weight))
            .map_err(|e| Error::Config(format!("stage `{}` mixture: {e}", stage.name)))?;
        Ok(Self {
            datasets: entries.iter().map(|m| m.dataset).collect(),
            choose,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Draws a (dataset, train index) pair.
    pub fn draw(&mut self, corpus: &Corpus) -> (DatasetKind, usize) {
        let kind = self.datasets[self.choose.sample(&mut self.rng)];
        let n = corpus.dataset(kind).train.len();
        (kind, self.rng.gen_range(0..n))
    }
}
