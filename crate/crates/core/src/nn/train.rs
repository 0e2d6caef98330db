use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use super::model::ConvNet;
use super::sgd::{Sgd, SgdConfig};
use crate::error::{Error, Result};
use crate::real::Real;

/// Epoch-wise shuffled mini-batches.
///
/// The permutation of epoch `e` depends only on `(seed, e)`, so the sampler state is
/// just `(epoch, cursor)` and can be checkpointed as two integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSampler {
    seed: u64,
    len: usize,
    batch_size: usize,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(seed: u64, len: usize, batch_size: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("cannot sample batches from an empty dataset".into()));
        }
        Self::resume(seed, len, batch_size, 0, 0)
    }

    pub fn resume(seed: u64, len: usize, batch_size: usize, epoch: u64, cursor: usize) -> Result<Self> {
        if batch_size == 0 || cursor > len {
            return Err(Error::Config("invalid batch sampler state".into()));
        }
        Ok(BatchSampler {
            seed,
            len,
            batch_size,
            epoch,
            cursor,
            order: epoch_order(seed, epoch, len),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Next batch of indices; the last batch of an epoch may be short.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.len {
            self.epoch += 1;
            self.cursor = 0;
            self.order = epoch_order(self.seed, self.epoch, self.len);
        }
        let end = (self.cursor + self.batch_size).min(self.len);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }
}

fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// SGD on shuffled mini-batches of one dataset.
#[derive(Debug, Clone)]
pub struct Trainer<T = f64> {
    pub sgd: Sgd<T>,
    pub sampler: BatchSampler,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: &ConvNet<T>, cfg: SgdConfig, data: &Dataset, seed: u64) -> Result<Self> {
        Ok(Trainer {
            sgd: Sgd::new(cfg, model)?,
            sampler: BatchSampler::new(seed, data.len(), cfg.batch_size)?,
        })
    }

    /// One forward/backward/update on the next batch. Returns the batch loss.
    pub fn step(&mut self, model: &mut ConvNet<T>, data: &Dataset) -> Result<f64> {
        let idx = self.sampler.next_batch();
        let (x, labels) = data.batch::<T>(&idx);
        let (loss, grads) = model.loss_and_grads(&x, &labels)?;
        self.sgd.step(model, &grads)?;
        Ok(loss)
    }

    /// Runs whole epochs; returns the mean loss of each epoch.
    pub fn train_epochs(&mut self, model: &mut ConvNet<T>, data: &Dataset, epochs: usize) -> Result<Vec<f64>> {
        let steps = self.sampler.batches_per_epoch();
        (0..epochs)
            .map(|_| {
                let mut total = 0.0;
                for _ in 0..steps {
                    total += self.step(model, data)?;
                }
                Ok(total / steps as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Top-1 accuracy and mean cross-entropy over the whole dataset.
pub fn evaluate<T: Real>(model: &ConvNet<T>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let batch_size = batch_size.max(1);
    for start in (0..data.len()).step_by(batch_size) {
        let idx: Vec<usize> = (start..(start + batch_size).min(data.len())).collect();
        let (x, labels) = data.batch::<T>(&idx);
        let logits = model.forward(&x)?;
        let (loss, _) = super::layers::softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss * idx.len() as f64;
        let k = logits.sample_len();
        for (row, &y) in logits.data().chunks_exact(k).zip(&labels) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            correct += usize::from(best == y);
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}
