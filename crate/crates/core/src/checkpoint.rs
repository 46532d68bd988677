//! Single-file checkpoint: a safetensors archive holding the predictor and
//! loss-estimator parameters plus string metadata (format version, class
//! names, architecture, training configuration and log).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::estimator::{LossEstimatorHead, Pairing};
use crate::model::{Architecture, Normalization, PredictorConfig, PredictorModel, NUM_STAGES};
use crate::nn::DEVICE;
use crate::training::{self, EpochLog, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

const PREDICTOR_PREFIX: &str = "predictor.";
const HEAD_PREFIX: &str = "head.";
const NORM_MEAN: &str = "normalization.mean";
const NORM_STD: &str = "normalization.std";

#[derive(Debug)]
pub struct CheckpointBundle {
    pub predictor: PredictorModel,
    pub head: LossEstimatorHead,
    pub class_names: Vec<String>,
    pub train_config: TrainConfig,
    pub log: Vec<EpochLog>,
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn split_usizes<const N: usize>(s: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint(format!("bad integer list `{s}`")))?;
    parts
        .try_into()
        .map_err(|_| Error::Checkpoint(format!("expected {N} integers in `{s}`")))
}

struct Meta(HashMap<String, String>);

impl Meta {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad metadata value for `{key}`")))
    }
}

impl CheckpointBundle {
    fn metadata(&self) -> Result<HashMap<String, String>> {
        if self.class_names.iter().any(|c| c.contains('\n')) {
            return Err(Error::input("class names may not contain newlines"));
        }
        let cfg = self.predictor.config();
        let (h, w, c) = cfg.input_shape;
        let mut meta = HashMap::new();
        meta.insert("format_version".into(), FORMAT_VERSION.to_string());
        meta.insert("architecture".into(), cfg.architecture.name().into());
        meta.insert("input_shape".into(), join(&[h, w, c]));
        meta.insert("num_classes".into(), cfg.num_classes.to_string());
        meta.insert("stage_channel_dims".into(), join(&cfg.stage_channels));
        meta.insert("blocks_per_stage".into(), join(&cfg.blocks_per_stage));
        meta.insert("hidden_dim".into(), self.head.hidden_dim().to_string());
        meta.insert("class_names".into(), self.class_names.join("\n"));
        for (k, v) in self.train_config.to_key_values() {
            meta.insert(format!("train.{k}"), v);
        }
        meta.insert("train_log".into(), training::training_log_csv(&self.log));
        Ok(meta)
    }

    /// Writes atomically: a failed save leaves no file at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = self.predictor.params().export(PREDICTOR_PREFIX)?;
        tensors.extend(self.head.params().export(HEAD_PREFIX)?);
        let norm = self.predictor.normalization();
        tensors.push((NORM_MEAN.into(), Tensor::from_slice(&norm.mean, norm.mean.len(), &DEVICE)?));
        tensors.push((NORM_STD.into(), Tensor::from_slice(&norm.std, norm.std.len(), &DEVICE)?));
        let bytes = safetensors::serialize(tensors, Some(self.metadata()?))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads parameters into freshly built networks of the given dtype.
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = Meta(header.metadata().clone().unwrap_or_default());
        let version: u32 = meta.parse("format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &DEVICE)?;

        let [h, w, c] = split_usizes::<3>(meta.get("input_shape")?)?;
        let config = PredictorConfig {
            architecture: Architecture::parse(meta.get("architecture")?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            input_shape: (h, w, c),
            num_classes: meta.parse("num_classes")?,
            stage_channels: split_usizes::<NUM_STAGES>(meta.get("stage_channel_dims")?)?,
            blocks_per_stage: split_usizes::<NUM_STAGES>(meta.get("blocks_per_stage")?)?,
        };
        let class_names: Vec<String> = meta.get("class_names")?.split('\n').map(String::from).collect();
        if class_names.len() != config.num_classes {
            return Err(Error::Checkpoint("class names disagree with num_classes".into()));
        }
        let mut predictor = PredictorModel::new(config, dtype, 0)?;
        predictor.params().import(PREDICTOR_PREFIX, |k| tensors.get(k).cloned())?;
        let vec_of = |key: &str| -> Result<Vec<f64>> {
            let t = tensors
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?)
        };
        predictor.set_normalization(Normalization {
            mean: vec_of(NORM_MEAN)?,
            std: vec_of(NORM_STD)?,
        })?;
        let mut head = LossEstimatorHead::new(
            predictor.stage_channel_dims(),
            meta.parse("hidden_dim")?,
            dtype,
            0,
        )?;
        head.params().import(HEAD_PREFIX, |k| tensors.get(k).cloned())?;
        head.mark_trained();

        let train_config = TrainConfig {
            beta_primary: meta.parse("train.beta1")?,
            beta_aux: meta.parse("train.beta2")?,
            margin: meta.parse("train.gamma")?,
            batch_size: meta.parse("train.batch_size")?,
            epochs: meta.parse("train.epochs")?,
            step_size: meta.parse("train.lr")?,
            seed: meta.parse("train.seed")?,
            split_fraction: meta.parse("train.split")?,
            pairing: Pairing::parse(meta.get("train.pairing")?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            hidden_dim: meta.parse("train.hidden_dim")?,
            architecture: Architecture::parse(meta.get("train.arch")?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        };
        Ok(Self {
            predictor,
            head,
            class_names,
            train_config,
            log: training::parse_training_log(meta.get("train_log")?)?,
        })
    }
}
