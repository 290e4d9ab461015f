use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchUnit {
    /// `size` examples per batch.
    Examples,
    /// As many examples as fit in `size` source plus target tokens.
    Tokens,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    pub unit: BatchUnit,
    pub size: usize,
    pub shuffle: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            unit: BatchUnit::Tokens,
            size: 4096,
            shuffle: true,
        }
    }
}

impl BatchConfig {
    pub fn examples(size: usize) -> Self {
        BatchConfig {
            unit: BatchUnit::Examples,
            size,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Splits the examples of one epoch into batches of indices. The order is a seeded
/// shuffle of `0..n` when enabled. Token batches always hold at least one example.
pub fn epoch_batches(examples: &[EncodedExample], cfg: &BatchConfig, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if cfg.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    match cfg.unit {
        BatchUnit::Examples => order.chunks(cfg.size).map(<[usize]>::to_vec).collect(),
        BatchUnit::Tokens => {
            let mut batches = Vec::new();
            let mut current = Vec::new();
            let mut tokens = 0;
            for i in order {
                let n = examples[i].token_count();
                if !current.is_empty() && tokens + n > cfg.size {
                    batches.push(std::mem::take(&mut current));
                    tokens = 0;
                }
                current.push(i);
                tokens += n;
            }
            if !current.is_empty() {
                batches.push(current);
            }
            batches
        }
    }
}
