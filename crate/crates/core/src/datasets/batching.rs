use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DomainPair;
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    /// Source samples per batch.
    pub batch_size: usize,
    pub seed: u64,
    pub flip: bool,
    /// Target samples per source sample in a batch.
    #[serde(default = "one")]
    pub batch_mix: f64,
}

fn one() -> f64 {
    1.0
}

impl BatchConfig {
    pub fn new(batch_size: usize, seed: u64, flip: bool) -> Self {
        Self {
            batch_size,
            seed,
            flip,
            batch_mix: 1.0,
        }
    }

    pub fn target_batch_size(&self) -> usize {
        ((self.batch_size as f64 * self.batch_mix).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub index: usize,
    pub flip: bool,
}

/// One step's worth of samples, split by domain.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MixedBatch {
    pub source: Vec<BatchItem>,
    pub target: Vec<BatchItem>,
}

/// Endless, seeded sequence of epochs over a two-domain dataset.
///
/// Epoch `e` shuffles both domains and draws mirror flags from a stream
/// derived from `(seed, e)`, so any epoch can be regenerated independently.
/// The longer domain is visited exactly once per epoch; the shorter one is
/// cycled so every batch holds both domains.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n_source: usize,
    n_target: usize,
    cfg: BatchConfig,
    epoch: usize,
    pending: std::vec::IntoIter<MixedBatch>,
}

const BATCH_STREAM_TAG: u64 = 0xBA7C;

impl BatchStream {
    pub fn new(n_source: usize, n_target: usize, cfg: BatchConfig) -> Result<Self> {
        if n_source == 0 {
            return Err(Error::EmptyDomain("source"));
        }
        if n_target == 0 {
            return Err(Error::EmptyDomain("target"));
        }
        if cfg.batch_size < 2 {
            return Err(Error::InvalidArgument(format!("batch_size must be >= 2, got {}", cfg.batch_size)));
        }
        if !(cfg.batch_mix > 0.0) {
            return Err(Error::InvalidArgument(format!("batch_mix must be positive, got {}", cfg.batch_mix)));
        }
        Ok(Self {
            n_source,
            n_target,
            cfg,
            epoch: 0,
            pending: Vec::new().into_iter(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        let bs = self.cfg.batch_size;
        let bt = self.cfg.target_batch_size();
        self.n_source.div_ceil(bs).max(self.n_target.div_ceil(bt))
    }

    pub fn epoch(&self, epoch: usize) -> Vec<MixedBatch> {
        let mut rng = stream(&[self.cfg.seed, BATCH_STREAM_TAG, epoch as u64]);
        let order = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<BatchItem> {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.into_iter()
                .map(|index| BatchItem {
                    index,
                    flip: self.cfg.flip && rng.random_bool(0.5),
                })
                .collect()
        };
        let src = order(self.n_source, &mut rng);
        let tgt = order(self.n_target, &mut rng);
        let n_batches = self.batches_per_epoch();
        let take = |items: &[BatchItem], size: usize, b: usize| -> Vec<BatchItem> {
            let n = items.len();
            if n.div_ceil(size) == n_batches {
                items[b * size..((b + 1) * size).min(n)].to_vec()
            } else {
                (0..size).map(|i| items[(b * size + i) % n]).collect()
            }
        };
        (0..n_batches)
            .map(|b| MixedBatch {
                source: take(&src, self.cfg.batch_size, b),
                target: take(&tgt, self.cfg.target_batch_size(), b),
            })
            .collect()
    }

    /// Epoch of the next batch returned by the iterator.
    pub fn current_epoch(&self) -> usize {
        self.epoch
    }
}

impl Iterator for BatchStream {
    type Item = MixedBatch;

    fn next(&mut self) -> Option<MixedBatch> {
        if let Some(b) = self.pending.next() {
            return Some(b);
        }
        self.pending = self.epoch(self.epoch).into_iter();
        self.epoch += 1;
        self.pending.next()
    }
}

/// Mixed-batch stream over `pair` with a 1:1 source/target ratio.
pub fn batches(pair: &DomainPair, batch_size: usize, seed: u64, flip: bool) -> Result<BatchStream> {
    BatchStream::new(pair.source.len(), pair.target.len(), BatchConfig::new(batch_size, seed, flip))
}
