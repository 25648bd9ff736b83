//! CTC training: warm-up plus inverse square-root learning rate, Adam,
//! global-norm clipping, checkpoints and a per-step log.

mod checkpoint;
mod log;
mod optimizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use log::TrainLog;
pub use optimizer::OptimizerState;

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{ctc_loss_on_tape, feasible, CtcError};
use crate::data::{make_batches, Batch, DataError, ParallelCorpus};
use crate::model::{Model, ModelError};
use crate::numerics::{Gradients, NumericsError, Scalar, Tape};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step}; batch lines {lines:?}")]
    NonFiniteLoss { step: u64, loss: f64, lines: Vec<usize> },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Upper bound on `sentences × longest source` per batch.
    pub batch_token_budget: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient norm limit; `None` disables clipping. Serialized as
    /// a number with 0 meaning disabled.
    #[serde(with = "zero_is_none")]
    pub clip_norm: Option<f64>,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            warmup_steps: 8000,
            total_steps: 100_000,
            batch_token_budget: 4096,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: Some(1.0),
            checkpoint_every: 1000,
            seed: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let fail = |m: &str| Err(TrainingError::Config(m.into()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be positive");
        }
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be at least 1");
        }
        if self.batch_token_budget == 0 {
            return fail("batch_token_budget must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return fail("clip_norm must be positive when set");
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be at least 1");
        }
        Ok(())
    }
}

mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

/// Linear warm-up to `base_lr` at `warmup`, then `base_lr · √(warmup / step)`.
pub fn lr_schedule(step: u64, base_lr: f64, warmup: u64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    if s <= w {
        base_lr * (s / w)
    } else {
        base_lr * (w / s).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Batch CTC loss per target token.
    pub loss: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Sentences dropped because their target cannot fit the frames.
    pub skipped: usize,
    pub wall_ms: f64,
}

/// Rescales `grads` so their global norm is at most `limit`; returns the
/// norm before clipping.
pub fn clip_gradients<F: Scalar>(grads: &mut Gradients<F>, limit: Option<f64>) -> f64 {
    let norm = grads.norm();
    if let Some(limit) = limit {
        if norm.is_finite() && norm > limit {
            grads.scale(F::from_f64_lossy(limit / norm));
        }
    }
    norm
}

fn feasible_subset(batch: &Batch, k: usize) -> (Batch, usize) {
    let keep: Vec<usize> = (0..batch.size())
        .filter(|&b| feasible(&batch.targets[b], k * batch.lengths[b]))
        .collect();
    if keep.len() == batch.size() {
        return (batch.clone(), 0);
    }
    let rows: Vec<&[u32]> = keep.iter().map(|&b| batch.source_row(b)).collect();
    let mut sub = Batch::from_sources(&rows);
    sub.targets = keep.iter().map(|&b| batch.targets[b].clone()).collect();
    sub.lines = keep.iter().map(|&b| batch.lines[b]).collect();
    (sub, batch.size() - keep.len())
}

/// One optimizer update on `batch`.
///
/// The loss is the summed CTC loss over the batch divided by its total
/// target length. The optimizer step counter advances even when every
/// sentence is skipped, in which case the parameters are left alone.
pub fn train_step<F: Scalar>(
    model: &mut Model<F>,
    batch: &Batch,
    opt: &mut OptimizerState<F>,
    cfg: &TrainingConfig,
) -> Result<StepMetrics, TrainingError> {
    let start = Instant::now();
    let step = opt.step_count() + 1;
    let lr = lr_schedule(step, cfg.base_lr, cfg.warmup_steps);
    let (batch, skipped) = feasible_subset(batch, model.config().split_factor);
    if batch.size() == 0 {
        opt.skip();
        return Ok(StepMetrics {
            step,
            loss: 0.0,
            lr,
            grad_norm: 0.0,
            skipped,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let (loss, mut grads) = {
        let mut tape = Tape::new(model.params());
        let (logits, frames) = model.forward_logits(&mut tape, &batch.source, &batch.layout())?;
        let (loss, parts) = ctc_loss_on_tape(&mut tape, logits, &frames, &batch.targets)?;
        let value = parts.total / parts.normalizer;
        if !value.is_finite() {
            return Err(TrainingError::NonFiniteLoss {
                step,
                loss: value,
                lines: batch.lines.clone(),
            });
        }
        (value, tape.backward(loss)?)
    };

    let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(TrainingError::NonFiniteLoss {
            step,
            loss,
            lines: batch.lines.clone(),
        });
    }
    opt.update(model.params_mut(), &grads, lr, cfg);

    Ok(StepMetrics {
        step,
        loss,
        lr,
        grad_norm,
        skipped,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Model plus optimizer state under one training configuration.
pub struct Trainer<F: Scalar> {
    pub model: Model<F>,
    pub opt: OptimizerState<F>,
    pub cfg: TrainingConfig,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Model<F>, cfg: TrainingConfig) -> Result<Self, TrainingError> {
        cfg.validate()?;
        let opt = OptimizerState::new(model.params());
        Ok(Self { model, opt, cfg })
    }

    /// Continues from a checkpoint; a missing optimizer state starts fresh
    /// moments at the checkpoint's step.
    pub fn resume(checkpoint: Checkpoint<F>, cfg: TrainingConfig) -> Result<Self, TrainingError> {
        cfg.validate()?;
        let opt = match checkpoint.optimizer {
            Some(opt) => opt,
            None => OptimizerState::at_step(checkpoint.model.params(), checkpoint.meta.step),
        };
        Ok(Self {
            model: checkpoint.model,
            opt,
            cfg,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step_count()
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics, TrainingError> {
        train_step(&mut self.model, batch, &mut self.opt, &self.cfg)
    }

    /// Trains until `total_steps`, reshuffling the batches every epoch.
    ///
    /// `after_step` runs after each logged step and may save checkpoints.
    pub fn fit<H>(
        &mut self,
        corpus: &ParallelCorpus,
        log: &mut TrainLog,
        mut after_step: H,
    ) -> Result<(), TrainingError>
    where
        H: FnMut(&Self, &StepMetrics) -> Result<(), TrainingError>,
    {
        let k = self.model.config().split_factor;
        let mut epoch = 0u64;
        while self.step() < self.cfg.total_steps {
            let batching = make_batches(
                corpus,
                self.cfg.batch_token_budget,
                k,
                self.cfg.seed.wrapping_add(epoch),
            )?;
            if batching.batches.is_empty() {
                return Err(TrainingError::Config("corpus yields no trainable batches".into()));
            }
            for batch in &batching.batches {
                if self.step() >= self.cfg.total_steps {
                    break;
                }
                let metrics = self.train_step(batch)?;
                log.record(&metrics)?;
                after_step(self, &metrics)?;
            }
            epoch += 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
