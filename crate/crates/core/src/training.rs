//! Joint training of the predictor and the loss estimator.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::DType;
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::CheckpointBundle;
use crate::data::{stratified_split, LabeledDataset, DEFAULT_SPLIT_FRACTION};
use crate::error::{Error, Result};
use crate::estimator::{
    self, LossEstimatorHead, Pairing, DEFAULT_BETA_AUX, DEFAULT_BETA_PRIMARY, DEFAULT_HIDDEN_DIM,
    DEFAULT_MARGIN,
};
use crate::model::{self, Architecture, Normalization, PredictorConfig, PredictorModel};
use crate::nn::{self, Mode};
use crate::raster::Image;

const EVAL_BATCH: usize = 64;
const HEAD_SEED_OFFSET: u64 = 0x5eed_0f_1055;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta_primary: f64,
    pub beta_aux: f64,
    pub margin: f64,
    /// Must be even so each batch splits into pairs.
    pub batch_size: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub seed: u64,
    pub split_fraction: f64,
    pub pairing: Pairing,
    pub hidden_dim: usize,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta_primary: DEFAULT_BETA_PRIMARY,
            beta_aux: DEFAULT_BETA_AUX,
            margin: DEFAULT_MARGIN,
            batch_size: 32,
            epochs: 20,
            step_size: 1e-3,
            seed: 7,
            split_fraction: DEFAULT_SPLIT_FRACTION,
            pairing: Pairing::Halves,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            architecture: Architecture::Desk,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::input(format!(
                "batch size {} must be even and at least 2",
                self.batch_size
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::input("split fraction must lie in (0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::input("epochs must be positive"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::input("step size must be positive"));
        }
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("beta1", self.beta_primary.to_string()),
            ("beta2", self.beta_aux.to_string()),
            ("gamma", self.margin.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.step_size.to_string()),
            ("seed", self.seed.to_string()),
            ("split", self.split_fraction.to_string()),
            ("pairing", self.pairing.name().to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("arch", self.architecture.name().to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub primary_loss: f64,
    pub aux_loss: f64,
    pub val_accuracy: f64,
    pub val_rank_correlation: f64,
}

pub const TRAIN_LOG_HEADER: [&str; 5] =
    ["epoch", "L_pri", "L_aux", "val_accuracy", "val_rank_correlation"];

pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = TRAIN_LOG_HEADER.join(",");
    out.push('\n');
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch, e.primary_loss, e.aux_loss, e.val_accuracy, e.val_rank_correlation
        );
    }
    out
}

pub fn parse_training_log(text: &str) -> Result<Vec<EpochLog>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut log = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint("malformed training log".into()))
        };
        log.push(EpochLog {
            epoch: f(0)? as usize,
            primary_loss: f(1)?,
            aux_loss: f(2)?,
            val_accuracy: f(3)?,
            val_rank_correlation: f(4)?,
        });
    }
    Ok(log)
}

pub fn write_training_log(log: &[EpochLog], path: &Path) -> Result<()> {
    std::fs::write(path, training_log_csv(log)).map_err(|e| Error::io(path, e))
}

/// Held-out metrics of a trained pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub rank_correlation: f64,
    pub true_losses: Vec<f64>,
    pub estimates: Vec<f64>,
}

/// Accuracy, true per-sample losses and loss estimates in evaluation mode.
pub fn evaluate(
    model: &PredictorModel,
    head: &LossEstimatorHead,
    dataset: &LabeledDataset,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let mut true_losses = Vec::with_capacity(dataset.len());
    let mut estimates = Vec::with_capacity(dataset.len());
    for chunk in dataset.items.chunks(EVAL_BATCH) {
        let images: Vec<Image> = chunk.iter().map(|(im, _)| im.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|(_, l)| *l).collect();
        let x = Image::stack_tensors(&images, model.dtype())?;
        let (logits, taps) = model.forward_tensor(&x, Mode::Eval)?;
        let rows = nn::to_vec1(&logits)?;
        let k = model.num_classes();
        let rows: Vec<Vec<f64>> = rows.chunks(k).map(<[f64]>::to_vec).collect();
        for (row, &l) in rows.iter().zip(&labels) {
            if model::argmax(row) == l {
                correct += 1;
            }
        }
        true_losses.extend(model::primary_loss(&rows, &labels)?);
        estimates.extend(nn::to_vec1(&head.forward_tensor(&taps)?)?);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / dataset.len() as f64,
        rank_correlation: estimator::rank_correlation(&estimates, &true_losses)?,
        true_losses,
        estimates,
    })
}

/// Trains predictor and loss estimator together on the train part of a
/// stratified split, logging held-out metrics after every epoch.
pub fn train_joint(dataset: &LabeledDataset, config: &TrainConfig) -> Result<CheckpointBundle> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("training dataset is empty"));
    }
    let present = dataset.class_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::input("training needs at least two classes"));
    }
    let (train, holdout) = stratified_split(dataset, config.split_fraction, config.seed)?;
    if train.len() < config.batch_size {
        return Err(Error::input(format!(
            "{} training samples cannot fill a batch of {}",
            train.len(),
            config.batch_size
        )));
    }

    let (h, w, c) = train.items[0].0.shape();
    let model_cfg = PredictorConfig::for_architecture(config.architecture, dataset.num_classes())
        .with_input_shape(h, w, c);
    let mut model = PredictorModel::new(model_cfg, DType::F32, config.seed)?;
    model.set_normalization(Normalization::from_images(train.items.iter().map(|(im, _)| im))?)?;
    let mut head = LossEstimatorHead::new(
        model.stage_channel_dims(),
        config.hidden_dim,
        DType::F32,
        config.seed ^ HEAD_SEED_OFFSET,
    )?;
    let mut vars = model.params().trainable();
    vars.extend(head.params().trainable());
    let mut opt = nn::adam(vars, config.step_size)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut pri_sum, mut aux_sum, mut batches) = (0.0, 0.0, 0usize);
        // Trailing partial batch is dropped so every batch pairs up.
        for batch in order.chunks_exact(config.batch_size) {
            let images: Vec<Image> = batch.iter().map(|&i| train.items[i].0.clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.items[i].1).collect();
            let x = Image::stack_tensors(&images, DType::F32)?;
            let (logits, taps) = model.forward_tensor(&x, Mode::Train)?;
            let per_sample = model::cross_entropy_tensor(&logits, &labels)?;
            let primary = per_sample.mean_all()?;
            let true_losses = nn::to_vec1(&per_sample)?;
            let estimates = head.forward_tensor(&taps)?;
            let aux =
                estimator::ranking_loss_tensor(&true_losses, &estimates, config.margin, config.pairing)?;
            let total = ((&primary * config.beta_primary)? + (&aux * config.beta_aux)?)?;
            let (p, a) = (nn::scalar(&primary)?, nn::scalar(&aux)?);
            if !(p.is_finite() && a.is_finite()) {
                return Err(Error::numerical(
                    format!("training diverged in epoch {epoch}"),
                    Vec::new(),
                ));
            }
            opt.backward_step(&total)?;
            pri_sum += p;
            aux_sum += a;
            batches += 1;
        }
        let eval = evaluate(&model, &head, &holdout)?;
        log.push(EpochLog {
            epoch,
            primary_loss: pri_sum / batches as f64,
            aux_loss: aux_sum / batches as f64,
            val_accuracy: eval.accuracy,
            val_rank_correlation: eval.rank_correlation,
        });
    }
    head.mark_trained();
    Ok(CheckpointBundle {
        predictor: model,
        head,
        class_names: dataset.class_names.clone(),
        train_config: config.clone(),
        log,
    })
}
