//! Training and fine-tuning loops, evaluation metrics, the split-candidate
//! and generalization experiment protocols, and their CSV/SVG reports.

mod experiment;
mod metrics;
mod report;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{default_sigma, encode_targets};
use crate::model::{ModelError, SdlNet, SplitPoint};
use crate::synth::{augment_with, mix_seed, AugmentConfig, DatasetSplit, Sample, SynthError};
use crate::tensor::{adam_step, retain_freed_memory, AdamConfig, AdamState, Tape, Tensor, TensorError};

pub use experiment::{
    cell_id, generalization_summary, nested_subset, run_generalization_experiment, run_split_experiment, split_study_summary,
    CellKind, ExperimentConfig, ExperimentResult, GeneralizationSummary, SplitStudyClass,
};
pub use metrics::{evaluate, evaluate_predictions, EvalMetrics};
pub use report::{report, results_csv, CSV_HEADER};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Target Gaussian width in pixels; `None` uses `default_sigma`.
    pub sigma: Option<f64>,
    pub input_size: usize,
    /// On-the-fly augmentation of training batches; `None` disables it.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            sigma: None,
            input_size: 64,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    /// Defaults for decoder fine-tuning: the same rate, half the epochs.
    pub fn finetune_default() -> Self {
        Self { max_epochs: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.patience < 1 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(TrainError::Config("batch size and max epochs must be at least 1".into()));
        }
        if self.sigma.is_some_and(|s| !(s > 0.0)) {
            return Err(TrainError::Config("sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(self.input_size))
    }
}

/// Which parameters an optimizer run may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSelection {
    All,
    /// Encoder frozen at the split; only the decoder trains.
    Decoder(SplitPoint),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    /// Training-mode loss on the unaugmented training set before any update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub seconds: f64,
}

/// `[B, 3, S, S]` images and `[B, 4, S, S]` heatmap targets.
pub fn batch_tensors(samples: &[&Sample], sigma: f64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.to_tensor()).collect();
    let targets: Vec<Tensor<f32>> =
        samples.iter().map(|s| encode_targets(&s.label, s.image.width() as usize, sigma).into_tensor()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&targets)?))
}

/// Mean heatmap MSE of `samples` with the model in inference mode.
pub fn mean_loss(model: &SdlNet, samples: &[Sample], sigma: f64) -> Result<f64> {
    dataset_loss(model, samples, sigma, false)
}

/// Mean heatmap MSE of `samples` without updating anything. In training
/// mode batch-norm layers use the statistics of each 32-sample chunk.
pub fn dataset_loss(model: &SdlNet, samples: &[Sample], sigma: f64, training_mode: bool) -> Result<f64> {
    const CHUNK: usize = 32;
    let mut total = 0.0;
    for range in batch_ranges(samples.len(), CHUNK) {
        let chunk = &samples[range];
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, t) = batch_tensors(&refs, sigma)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let pass = model.forward(&mut tape, xv, training_mode)?;
        let tv = tape.leaf(t, false);
        let loss = tape.mse_loss(pass.heatmaps, tv)?;
        total += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Consecutive ranges of at most `size` items; a trailing single item joins
/// the previous range because batch statistics need two samples.
fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("two ranges").end = last.end;
    }
    out
}

fn check_data(model: &SdlNet, data: &DatasetSplit, config: &TrainConfig) -> Result<()> {
    if data.train.len() < 2 || data.validation.is_empty() {
        return Err(TrainError::Data(format!(
            "training needs at least 2 train samples and a non-empty validation set, got {} and {}",
            data.train.len(),
            data.validation.len()
        )));
    }
    let s = model.config().input_size;
    if config.input_size != s {
        return Err(TrainError::Config(format!("train input size {} differs from model input {s}", config.input_size)));
    }
    for sample in data.train.iter().chain(&data.validation) {
        if sample.image.dimensions() != (s as u32, s as u32) {
            return Err(TrainError::Data(format!(
                "sample {} is {:?} but the model expects {s}x{s}",
                sample.seed,
                sample.image.dimensions()
            )));
        }
    }
    Ok(())
}

/// Minimizes heatmap MSE with Adam over seeded shuffled mini-batches,
/// stopping after `patience` epochs without a validation improvement and
/// restoring the best weights.
pub fn train(model: &mut SdlNet, selection: ParamSelection, data: &DatasetSplit, config: &TrainConfig) -> Result<History> {
    train_with_progress(model, selection, data, config, |_| {})
}

/// `train`, calling `on_epoch` after every epoch.
pub fn train_with_progress(
    model: &mut SdlNet,
    selection: ParamSelection,
    data: &DatasetSplit,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    config.validate()?;
    check_data(model, data, config)?;
    retain_freed_memory();
    match selection {
        ParamSelection::All => model.unfreeze(),
        ParamSelection::Decoder(split) => model.freeze_encoder(split),
    }
    let start = Instant::now();
    let sigma = config.sigma();
    let initial_train_loss = dataset_loss(model, &data.train, sigma, true)?;
    let adam = AdamConfig { lr: config.learning_rate, ..AdamConfig::default() };
    let mut state = AdamState::new(model.params(), adam);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.weights());
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, range) in batch_ranges(order.len(), config.batch_size).into_iter().enumerate() {
            let idx = &order[range];
            let augmented: Vec<Sample> = match &config.augment {
                Some(aug) => idx.iter().map(|&i| augment_with(&data.train[i], &mut rng, aug).0).collect(),
                None => idx.iter().map(|&i| data.train[i].clone()).collect(),
            };
            let refs: Vec<&Sample> = augmented.iter().collect();
            let (x, t) = batch_tensors(&refs, sigma)?;
            let loss = step(model, &mut state, x, t)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b + 1 });
            }
            loss_sum += loss * idx.len() as f64;
        }
        let val_loss = mean_loss(model, &data.validation, sigma)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: 0 });
        }
        let record = EpochRecord { epoch, train_loss: loss_sum / order.len() as f64, val_loss };
        on_epoch(&record);
        epochs.push(record);
        if val_loss < best.0 {
            best = (val_loss, epoch, model.weights());
        } else if epoch - best.1 >= config.patience {
            stopped_early = true;
            break;
        }
    }
    let (best_val_loss, best_epoch, weights) = best;
    model.set_weights(weights);
    Ok(History { initial_train_loss, epochs, best_epoch, best_val_loss, stopped_early, seconds: start.elapsed().as_secs_f64() })
}

fn step(model: &mut SdlNet, state: &mut AdamState<f32>, x: Tensor<f32>, t: Tensor<f32>) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let pass = model.forward(&mut tape, xv, true)?;
    let tv = tape.leaf(t, false);
    let loss = tape.mse_loss(pass.heatmaps, tv)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = tape.backward(loss)?;
    for (i, v) in pass.bindings.iter().enumerate() {
        match grads.take(*v) {
            Some(g) => model.params_mut()[i].grad = g,
            None => model.params_mut()[i].zero_grad(),
        }
    }
    drop(tape);
    model.apply_bn_updates(&pass.bn_updates);
    adam_step(model.params_mut(), state)?;
    Ok(value)
}
