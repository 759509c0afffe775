//! End-to-end optimization of measurement and reconstruction.
//!
//! The objective is the batch mean of per-image summed squared residuals
//! (not a per-pixel mean), so the effective step size of Adam is unaffected
//! but reported loss values scale with the crop area.

mod checkpoint;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};

use crate::data::{BatchIterator, ImageRecord};
use crate::error::{Error, Result};
use crate::kernels::{adam_step, AdamState};
use crate::model::{AnyModel, CsModel, Method, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    /// Batches per epoch; `None` means `ceil(dataset / batch_size)`.
    pub steps_per_epoch: Option<u64>,
    pub checkpoint_path: Option<PathBuf>,
    pub log_every: u64,
    /// Global L2 gradient-norm cap, off by default.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-4,
            epochs: 200,
            batch_size: 8,
            crop_size: 64,
            seed: 0,
            steps_per_epoch: None,
            checkpoint_path: None,
            log_every: 50,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.crop_size == 0 || self.crop_size % self.model.block_size != 0 {
            return Err(Error::Config(format!(
                "crop size {} must be a positive multiple of block size {}",
                self.crop_size, self.model.block_size
            )));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps per epoch must be positive".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("gradient clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch_for(&self, dataset_len: usize) -> u64 {
        self.steps_per_epoch
            .unwrap_or_else(|| dataset_len.div_ceil(self.batch_size) as u64)
    }
}

/// Loss observed at one optimizer step (before that step's update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f32,
}

/// `step,loss` CSV with shortest round-trip float formatting.
pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,loss\n");
    for r in history {
        let _ = writeln!(out, "{},{}", r.step, r.loss);
    }
    out
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_of_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// Owns the model, optimizer and batch stream of one training run.
pub struct Trainer {
    config: TrainConfig,
    model: AnyModel<f32>,
    optimizer: AdamState<f32>,
    batches: BatchIterator,
    steps_per_epoch: u64,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, method: Method, dataset: Arc<Vec<ImageRecord>>) -> Result<Self> {
        config.validate()?;
        let model = AnyModel::init(method, config.model, config.seed)?;
        let optimizer = AdamState::new(model.named_params().into_iter().map(|(_, t)| t));
        let steps_per_epoch = config.steps_per_epoch_for(dataset.len());
        let batches = BatchIterator::new(dataset, config.crop_size, config.batch_size, config.seed)?;
        Ok(Trainer {
            config,
            model,
            optimizer,
            batches,
            steps_per_epoch,
            step: 0,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, checkpoint: Checkpoint, dataset: Arc<Vec<ImageRecord>>) -> Result<Self> {
        config.validate()?;
        if config.model != checkpoint.config {
            return Err(Error::Config(format!(
                "checkpoint model {:?} differs from requested {:?}",
                checkpoint.config, config.model
            )));
        }
        let model = checkpoint.to_model()?;
        let steps_per_epoch = config.steps_per_epoch_for(dataset.len());
        let batches = match checkpoint.iterator {
            Some(state) => BatchIterator::restore(dataset, config.crop_size, config.batch_size, state)?,
            None => BatchIterator::new(dataset, config.crop_size, config.batch_size, config.seed)?,
        };
        Ok(Trainer {
            config,
            model,
            optimizer: checkpoint.optimizer,
            batches,
            steps_per_epoch,
            step: checkpoint.step,
        })
    }

    pub fn model(&self) -> &AnyModel<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.config.epochs * self.steps_per_epoch
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    /// One Adam update on the next batch; returns the pre-update loss.
    pub fn step(&mut self) -> Result<LossRecord> {
        let batch = self.batches.next_batch()?;
        let step = self.step + 1;
        let (loss, mut grads) = self.model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss as f64,
            });
        }
        if let Some(max_norm) = self.config.clip_grad_norm {
            clip_global_norm(&mut grads, max_norm);
        }
        let mut params = self.model.params_mut();
        adam_step(&mut params, &grads, &mut self.optimizer, self.config.lr)?;
        self.step = step;
        if self.config.log_every > 0 && step % self.config.log_every == 0 {
            log::info!(
                "{} step {step}/{} epoch {} loss {loss}",
                self.model.method(),
                self.total_steps(),
                self.epoch()
            );
        }
        Ok(LossRecord { step, loss })
    }

    pub fn run(&mut self, steps: u64) -> Result<Vec<LossRecord>> {
        (0..steps).map(|_| self.step()).collect()
    }

    /// Runs until `epochs * steps_per_epoch` steps have completed.
    pub fn run_to_end(&mut self) -> Result<Vec<LossRecord>> {
        let remaining = self.total_steps().saturating_sub(self.step);
        self.run(remaining)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.optimizer = self.optimizer.clone();
        ck.iterator = Some(self.batches.state());
        ck.step = self.step;
        ck.epoch = self.epoch();
        ck
    }
}

/// Final state and per-step losses of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
}

/// Trains `method` for the configured number of epochs and writes the
/// checkpoint if a path is configured.
pub fn train(config: TrainConfig, method: Method, dataset: Arc<Vec<ImageRecord>>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, method, dataset)?;
    let history = trainer.run_to_end()?;
    let checkpoint = trainer.checkpoint();
    if let Some(path) = &trainer.config.checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { checkpoint, history })
}

/// Joint training of the block measurement and full-image reconstruction.
pub fn train_full(config: TrainConfig, dataset: Arc<Vec<ImageRecord>>) -> Result<TrainOutcome> {
    train(config, Method::Full, dataset)
}

/// Joint training of the block measurement and per-block affine reconstruction.
pub fn train_baseline(config: TrainConfig, dataset: Arc<Vec<ImageRecord>>) -> Result<TrainOutcome> {
    train(config, Method::Baseline, dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig::new(4, 0.25, 4, 1).unwrap(),
            lr: 1e-3,
            epochs: 3,
            batch_size: 2,
            crop_size: 8,
            seed: 1,
            log_every: 0,
            ..TrainConfig::default()
        }
    }

    fn dataset() -> Arc<Vec<ImageRecord>> {
        Arc::new(
            (0..3)
                .map(|k| {
                    let levels: Vec<f64> = (0..144).map(|i| ((i * (k + 3)) % 251) as f64).collect();
                    ImageRecord::from_levels(format!("img{k}.pgm"), 12, 12, &levels).unwrap()
                })
                .collect(),
        )
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.crop_size = 10;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.lr = -1.0;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn default_epoch_length_covers_dataset() {
        let t = Trainer::new(tiny_config(), Method::Full, dataset()).unwrap();
        assert_eq!(t.total_steps(), 3 * 2);
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        for method in [Method::Full, Method::Baseline] {
            let mut cfg = tiny_config();
            cfg.lr = 0.0;
            let mut t = Trainer::new(cfg, method, dataset()).unwrap();
            let before = Checkpoint::from_model(t.model()).params;
            t.run(4).unwrap();
            assert_eq!(Checkpoint::from_model(t.model()).params, before);
        }
    }

    #[test]
    fn nan_input_reports_divergence_step() {
        let mut data = (*dataset()).clone();
        for r in &mut data {
            r.pixels.data_mut().fill(f32::NAN);
        }
        let mut t = Trainer::new(tiny_config(), Method::Baseline, Arc::new(data)).unwrap();
        assert!(matches!(t.step(), Err(Error::Diverged { step: 1, .. })));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::filled([1, 1, 1, 4], 10.0f32)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 20.0).abs() < 1e-9);
        assert!((g[0].sum_of_squares().sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn csv_format() {
        let csv = loss_csv(&[LossRecord { step: 1, loss: 2.5 }, LossRecord { step: 2, loss: 0.1 }]);
        assert_eq!(csv, "step,loss\n1,2.5\n2,0.1\n");
    }
}
