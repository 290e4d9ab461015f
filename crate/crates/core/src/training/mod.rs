//! Optimizers, batching, the training loop and checkpoints.

pub mod batch;
pub mod checkpoint;
pub mod optim;

use serde::{Deserialize, Serialize};

pub use batch::{epoch_batches, BatchConfig, BatchUnit};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{
    clip_global_norm, warmup_rate, Adagrad, AdagradConfig, AdamConfig, AdamWarmup, Optimizer, OptimizerConfig,
};

use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::exec::{par_map, Execution};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch: BatchConfig,
    pub max_steps: u64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Dev evaluation cadence in steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch: BatchConfig::default(),
            max_steps: 10_000,
            clip_norm: 2.0,
            eval_every: 500,
            checkpoint_every: 1000,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.batch.validate()?;
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("clip_norm {} must be finite and nonnegative", self.clip_norm)));
        }
        Ok(())
    }
}

/// Position in the training stream, enough to resume deterministically.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainProgress {
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
    /// Next batch index within `epoch`.
    pub cursor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossPoint {
    pub step: u64,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean loss and mean gradient over `batch`. Per-example work runs under `exec`; the
/// reduction is always in batch order.
pub fn batch_gradients(
    model: &Model,
    batch: &[&EncodedExample],
    exec: Execution,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let indexed: Vec<(usize, &EncodedExample)> = batch.iter().copied().enumerate().collect();
    let results = par_map(exec, &indexed, |&(i, ex)| {
        let mut dropout = model.dropout(mix(dropout_seed, i as u64, 0));
        model.loss_and_gradients(ex, &mut dropout)
    });
    let mut total = 0.0;
    let mut sum: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        for (acc, g) in sum.iter_mut().zip(grads) {
            if let Some(g) = g {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    let n = batch.len() as f64;
    for g in &mut sum {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok((total / n, sum))
}

/// Per-token negative log-likelihood over `examples`, weighting each example by its
/// number of predicted tokens.
pub fn corpus_loss(model: &Model, examples: &[EncodedExample], exec: Execution) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to score".into()));
    }
    let losses = par_map(exec, examples, |ex| {
        model.loss(ex).map(|l| (l * ex.decoder_output().len() as f64, ex.decoder_output().len()))
    });
    let mut sum = 0.0;
    let mut tokens = 0;
    for r in losses {
        let (l, n) = r?;
        sum += l;
        tokens += n;
    }
    Ok(sum / tokens as f64)
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    pub progress: TrainProgress,
    pub exec: Execution,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(&config.optimizer, model.config.d_model, &model.params);
        let progress = TrainProgress {
            seed: config.seed,
            ..TrainProgress::default()
        };
        Ok(Trainer {
            model,
            optimizer,
            config,
            progress,
            exec,
        })
    }

    /// Continues from saved state. The optimizer is rebuilt fresh when the checkpoint
    /// carries none or one of a different kind.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let model = checkpoint.model()?;
        let optimizer = match checkpoint.optimizer {
            Some(o) if std::mem::discriminant(&o.config()) == std::mem::discriminant(&config.optimizer) => o,
            _ => Optimizer::new(&config.optimizer, model.config.d_model, &model.params),
        };
        Ok(Trainer {
            model,
            optimizer,
            config,
            progress: checkpoint.progress,
            exec,
        })
    }

    /// One optimizer update on `batch`; returns the batch loss before the update.
    pub fn step(&mut self, batch: &[&EncodedExample]) -> Result<f64> {
        let step = self.progress.step + 1;
        let (loss, mut grads) = batch_gradients(&self.model, batch, self.exec, mix(self.progress.seed, step, 1))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("batch loss is {loss}"),
            });
        }
        let norm = if self.config.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.config.clip_norm)
        } else {
            clip_global_norm(&mut grads, f64::INFINITY)
        };
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient norm is {norm}"),
            });
        }
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.progress.step = step;
        Ok(loss)
    }

    /// Trains until `max_steps`, calling `observer` after every step. Dev loss is
    /// attached at the evaluation cadence and after the final step.
    pub fn run(
        &mut self,
        train: &[EncodedExample],
        dev: &[EncodedExample],
        mut observer: impl FnMut(&Trainer, &LossPoint) -> Result<()>,
    ) -> Result<Vec<LossPoint>> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut curve = Vec::new();
        let mut batches = epoch_batches(train, &self.config.batch, self.progress.seed, self.progress.epoch);
        while self.progress.step < self.config.max_steps {
            if self.progress.cursor >= batches.len() {
                self.progress.epoch += 1;
                self.progress.cursor = 0;
                batches = epoch_batches(train, &self.config.batch, self.progress.seed, self.progress.epoch);
            }
            let batch: Vec<&EncodedExample> = batches[self.progress.cursor].iter().map(|&i| &train[i]).collect();
            let train_loss = self.step(&batch)?;
            self.progress.cursor += 1;
            let step = self.progress.step;
            let due = step == self.config.max_steps || (self.config.eval_every > 0 && step.is_multiple_of(self.config.eval_every));
            let dev_loss = if due && !dev.is_empty() {
                let l = corpus_loss(&self.model, dev, self.exec)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        detail: format!("dev loss is {l}"),
                    });
                }
                Some(l)
            } else {
                None
            };
            let point = LossPoint {
                step,
                train_loss,
                dev_loss,
            };
            observer(self, &point)?;
            curve.push(point);
        }
        Ok(curve)
    }
}
