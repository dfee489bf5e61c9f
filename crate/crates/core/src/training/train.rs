use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use ndarray::ArrayView1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dice_loss, dice_loss_grad, Optimizer, OptimizerKind};
use crate::data::{augment, sample_augment_params, Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::model::{HyperParams, UNet};
use crate::nn::Tensor;

pub const DEFAULT_EPOCHS: usize = 100;

/// Images per eval-mode pass when scoring a whole dataset.
const EVAL_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CheckpointPolicy {
    /// Keep the parameters from the epoch with the lowest validation loss.
    #[default]
    BestValidation,
    /// Keep the parameters after the final epoch.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub augment: bool,
    pub seed: u64,
    pub checkpoint_policy: CheckpointPolicy,
}

impl TrainConfig {
    /// Batch size, learning rate and optimizer from `hp`; 100 epochs with
    /// augmentation and best-validation checkpointing.
    pub fn from_hyperparams(hp: &HyperParams, seed: u64) -> Result<Self> {
        Ok(Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: hp.batch_size as usize,
            learning_rate: hp.learning_rate,
            optimizer: OptimizerKind::from_code(hp.optimizer)?,
            augment: true,
            seed,
            checkpoint_policy: CheckpointPolicy::BestValidation,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean Dice loss over the epoch's (augmented) training batches.
    pub train_loss: f64,
    /// Dice loss over the whole validation set; `None` without one.
    pub val_loss: Option<f64>,
}

impl EpochStats {
    /// Validation loss, or training loss when there is no validation set.
    fn selection_loss(&self) -> f64 {
        self.val_loss.unwrap_or(self.train_loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: UNet,
    pub history: Vec<EpochStats>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    /// Validation loss of the returned parameters.
    pub final_validation_loss: Option<f64>,
}

fn check_sizes(model: &UNet, ds: &Dataset) -> Result<()> {
    let s = model.input_size();
    match ds.samples.iter().find(|x| x.image.dim() != (s, s)) {
        Some(bad) => Err(Error::invalid(format!(
            "sample {} is {:?} but the model expects {s}×{s}; preprocess the dataset first",
            bad.id,
            bad.image.dim()
        ))),
        None => Ok(()),
    }
}

/// Soft Dice loss of eval-mode predictions with sums taken over the whole
/// dataset.
pub fn dataset_dice_loss(model: &mut UNet, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot score an empty dataset"));
    }
    check_sizes(model, ds)?;
    let mut pred = Vec::with_capacity(ds.len() * model.input_size().pow(2));
    let mut target = Vec::with_capacity(pred.capacity());
    for chunk in ds.samples.chunks(EVAL_CHUNK) {
        let views: Vec<_> = chunk.iter().map(|s| s.image.view()).collect();
        let probs = model.forward(Tensor::from_images(&views), false)?;
        pred.extend(probs.data.iter().map(|&p| p as f64));
        for s in chunk {
            target.extend(s.mask.iter().map(|&m| m as f64));
        }
    }
    dice_loss(ArrayView1::from(&pred[..]), ArrayView1::from(&target[..]))
}

/// Mini-batch Dice-loss training. Deterministic for a given `cfg.seed`.
pub fn train(mut model: UNet, split: &SplitDataset, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    check_sizes(&model, &split.train)?;
    check_sizes(&model, &split.validation)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.reseed_dropout(cfg.seed.wrapping_add(1));
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Vec<f32>>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(idx.len());
            let mut target = Vec::with_capacity(idx.len() * model.input_size().pow(2));
            for &i in idx {
                let s = &split.train.samples[i];
                let (img, mask) = if cfg.augment {
                    let params = sample_augment_params(&mut rng);
                    augment(s.image.view(), s.mask.view(), &params)?
                } else {
                    (s.image.clone(), s.mask.clone())
                };
                target.extend(mask.iter().map(|&m| m as f64));
                images.push(img);
            }
            let views: Vec<_> = images.iter().map(|i| i.view()).collect();
            let probs = model.forward(Tensor::from_images(&views), true)?;
            let pred: Vec<f64> = probs.data.iter().map(|&p| p as f64).collect();
            let (loss, grad) = dice_loss_grad(ArrayView1::from(&pred[..]), ArrayView1::from(&target[..]))?;
            if !loss.is_finite() {
                model.clear_cache();
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            let mut dprobs = probs;
            dprobs
                .data
                .iter_mut()
                .zip(grad.iter())
                .for_each(|(d, &g)| *d = g as f32);
            model.backward(&dprobs);
            optimizer.step(model.params());
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_loss = if split.validation.is_empty() {
            None
        } else {
            let v = dataset_dice_loss(&mut model, &split.validation)?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: 0 });
            }
            Some(v)
        };
        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
        };
        debug!("epoch {epoch}: train {train_loss:.4}, val {val_loss:?}");
        let improved = best.as_ref().is_none_or(|(_, l, _)| stats.selection_loss() < *l);
        if improved {
            let snapshot = match cfg.checkpoint_policy {
                CheckpointPolicy::BestValidation => model.snapshot(),
                CheckpointPolicy::Last => Vec::new(),
            };
            best = Some((epoch, stats.selection_loss(), snapshot));
        }
        history.push(stats);
    }

    let (best_epoch, _, snapshot) = best.expect("at least one epoch ran");
    let final_validation_loss = match cfg.checkpoint_policy {
        CheckpointPolicy::BestValidation => {
            model.restore(&snapshot)?;
            history[best_epoch - 1].val_loss
        }
        CheckpointPolicy::Last => history.last().and_then(|h| h.val_loss),
    };
    info!(
        "trained {} epochs; best epoch {best_epoch}, validation loss {:?}",
        cfg.epochs, final_validation_loss
    );
    Ok(TrainResult {
        model,
        history,
        best_epoch,
        final_validation_loss,
    })
}

/// Writes `epoch,train_loss,val_loss` rows; a missing validation loss is empty.
pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for h in history {
        let val = h.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(out, "{},{:.6},{}", h.epoch, h.train_loss, val).expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochStats>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("").trim().to_owned();
        let parse = |s: String| {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad history value {s:?}")))
        };
        let val = field(2);
        out.push(EpochStats {
            epoch: field(0)
                .parse()
                .map_err(|_| Error::invalid("bad epoch number in history"))?,
            train_loss: parse(field(1))?,
            val_loss: if val.is_empty() { None } else { Some(parse(val)?) },
        });
    }
    Ok(out)
}
