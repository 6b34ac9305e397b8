//! Adam optimization, checkpoints and the training loop.

mod adam;
mod checkpoint;

pub use adam::{AdamState, BETA1, BETA2, DEFAULT_LR, EPS_ADAM};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{augment, AugmentParams, ImageSample};
use crate::error::{Error, Result};
use crate::infer::predict_single_scale;
use crate::metrics::{batch_jaccard_loss, binarize, ConfusionCounts, DEFAULT_THRESHOLD, JACCARD_EPS};
use crate::model::{CpnetModel, SIZE_MULTIPLE};
use crate::nn::{Mode, Module};
use crate::rng::rng_from;
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_INPUT_SIZE: usize = 192;
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub global_seed: u64,
    pub lr: f64,
    /// Square side every training image is resized to.
    pub input_size: usize,
    pub augment: bool,
    /// Best-validation checkpoint destination.
    pub checkpoint_path: Option<PathBuf>,
    pub history_path: Option<PathBuf>,
    /// Stop after the first epoch whose mean train loss is at or below this.
    pub target_loss: Option<f64>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            global_seed: 0,
            lr: DEFAULT_LR,
            input_size: DEFAULT_INPUT_SIZE,
            augment: true,
            checkpoint_path: None,
            history_path: None,
            target_loss: None,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::InvalidArgument(format!(
                "input size {} is not a positive multiple of 32",
                self.input_size
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-image loss over the epoch.
    pub train_loss: f64,
    pub val_ber: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch of the returned model: lowest validation BER, earliest on ties;
    /// the last epoch when there is no validation set.
    pub best_epoch: usize,
    pub best_val_ber: Option<f64>,
    pub best: CpnetModel,
    pub adam: AdamState,
}

/// Resized (and optionally augmented) batch tensors `(N,3,S,S)`, `(N,1,S,S)`.
pub fn prepare_batch(
    samples: &[ImageSample],
    indices: &[usize],
    epoch: usize,
    config: &TrainConfig,
) -> Result<(Tensor, Tensor)> {
    let prepared: Vec<ImageSample> = indices
        .par_iter()
        .map(|&i| {
            let s = &samples[i];
            let s = if config.augment {
                augment(s, &AugmentParams::sample(config.global_seed, epoch as u64, i as u64))?
            } else {
                s.clone()
            };
            s.resized(config.input_size, config.input_size)
        })
        .collect::<Result<_>>()?;
    let rgb: Vec<Tensor> = prepared.iter().map(|s| s.rgb.clone()).collect();
    let mask: Vec<Tensor> = prepared.into_iter().map(|s| s.mask).collect();
    Ok((Tensor::stack(&rgb)?, Tensor::stack(&mask)?))
}

/// One optimization step; returns the batch loss.
pub fn train_step(model: &mut CpnetModel, adam: &mut AdamState, x: Tensor, y: Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let tv = tape.constant(y);
    let pred = model.run(&mut tape, xv)?;
    if !tape.value(pred)?.all_finite() {
        return Ok(f32::NAN);
    }
    let loss = batch_jaccard_loss(&mut tape, tv, pred, JACCARD_EPS as f32)?;
    let value = tape.value(loss)?.data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    model.collect_grads(&tape);
    adam.step(model.parameters_mut())?;
    model.zero_grads();
    Ok(value)
}

/// Pixel-aggregated validation counts at a single scale.
pub fn evaluate_at_scale(model: &CpnetModel, samples: &[ImageSample], scale: usize) -> Result<ConfusionCounts> {
    let counts: Vec<ConfusionCounts> = samples
        .par_iter()
        .map(|s| {
            let prob = predict_single_scale(model, &s.rgb, scale)?;
            ConfusionCounts::default().accumulate(&binarize(&prob, DEFAULT_THRESHOLD), &s.mask)
        })
        .collect::<Result<_>>()?;
    Ok(counts.into_iter().fold(ConfusionCounts::default(), ConfusionCounts::merge))
}

pub fn train(
    model: &mut CpnetModel,
    train_set: &[ImageSample],
    val_set: &[ImageSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut adam = AdamState::new(config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, Option<f64>, CpnetModel)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng_from(&[config.global_seed, epoch as u64, 0x5F]));
        model.set_mode(Mode::Train);
        let mut loss_sum = 0.0f64;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = prepare_batch(train_set, idx, epoch, config)?;
            let loss = train_step(model, &mut adam, x, y)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            loss_sum += f64::from(loss) * idx.len() as f64;
        }
        model.set_mode(Mode::Eval);
        let val_ber = if val_set.is_empty() {
            None
        } else {
            evaluate_at_scale(model, val_set, config.input_size)?.report().ber
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_ber,
        };
        if config.verbose {
            let ber = record.val_ber.map_or("n/a".to_string(), |b| format!("{:.4}", b));
            eprintln!("epoch {epoch:>4}  loss {:.5}  val_ber {ber}", record.train_loss);
        }
        let improves = match (&best, val_ber) {
            (None, _) => true,
            (Some((_, Some(b), _)), Some(v)) => v < *b,
            (Some((_, None, _)), Some(_)) => true,
            (Some(_), None) => val_set.is_empty(),
        };
        if improves {
            best = Some((epoch, val_ber, model.clone()));
        }
        let reached = config.target_loss.is_some_and(|t| record.train_loss <= t);
        history.push(record);
        if reached {
            break;
        }
    }
    let (best_epoch, best_val_ber, best) = best.expect("at least one epoch");
    if let Some(path) = &config.checkpoint_path {
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), best_epoch.to_string());
        meta.insert("global_seed".to_string(), config.global_seed.to_string());
        meta.insert("input_size".to_string(), config.input_size.to_string());
        save_checkpoint(path, &best, None, &meta)?;
    }
    if let Some(path) = &config.history_path {
        write_history_csv(path, &history)?;
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_ber,
        best,
        adam,
    })
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_ber\n");
    for r in history {
        let ber = r.val_ber.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, ber);
    }
    out
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
