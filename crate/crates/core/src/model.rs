//! Residual convolutional classifier with one feature tap per stage.
//!
//! The network normalizes raw `[0, 1]` images with per-channel statistics
//! stored alongside its parameters, so callers always pass raw images and the
//! encoding function works on the normalized input.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, Linear, Mode, ParamStore, DEVICE};
use crate::raster::{FeatureMap, Image};

pub const NUM_STAGES: usize = 4;

/// Stage used as the encoding function when none is specified.
pub const DEFAULT_BLOCK: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// 3x3 stem at full resolution, one residual block per stage.
    Desk,
    /// 7x7 stride-2 stem with max pooling, two residual blocks per stage.
    ResNet18,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Desk => "desk",
            Architecture::ResNet18 => "resnet18",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Architecture::Desk),
            "resnet18" => Ok(Architecture::ResNet18),
            other => Err(Error::input(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorConfig {
    pub architecture: Architecture,
    /// `(height, width, channels)`
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub blocks_per_stage: [usize; NUM_STAGES],
}

impl PredictorConfig {
    /// Desk-scale network for 32x32 RGB inputs with stage widths 16..128.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Desk,
            input_shape: (32, 32, 3),
            num_classes,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
        }
    }

    /// ResNet-18 layout for 224x224 RGB inputs.
    pub fn resnet18(num_classes: usize) -> Self {
        Self {
            architecture: Architecture::ResNet18,
            input_shape: (224, 224, 3),
            num_classes,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
        }
    }

    pub fn for_architecture(arch: Architecture, num_classes: usize) -> Self {
        match arch {
            Architecture::Desk => Self::desk(num_classes),
            Architecture::ResNet18 => Self::resnet18(num_classes),
        }
    }

    pub fn with_input_shape(mut self, height: usize, width: usize, channels: usize) -> Self {
        self.input_shape = (height, width, channels);
        self
    }

    pub fn with_stage_channels(mut self, channels: [usize; NUM_STAGES]) -> Self {
        self.stage_channels = channels;
        self
    }

    fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::input("input shape must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::input("a classifier needs at least 2 classes"));
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) {
            return Err(Error::input("stage widths and block counts must be positive"));
        }
        Ok(())
    }
}

/// Per-channel standardization applied before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel statistics over a set of images; std is floored at 1e-6.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut sums: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for im in images {
            let c = im.channels();
            if sums.is_empty() {
                sums = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sums.len() != c {
                return Err(Error::input("images disagree on channel count"));
            }
            for px in im.data().chunks(c) {
                for (ch, v) in px.iter().enumerate() {
                    sums[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += im.height() * im.width();
        }
        if count == 0 {
            return Err(Error::input("cannot compute statistics of an empty image set"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.mean.len();
        let mean = Tensor::from_slice(&self.mean, (1, c, 1, 1), &DEVICE)?.to_dtype(x.dtype())?;
        let std = Tensor::from_slice(&self.std, (1, c, 1, 1), &DEVICE)?.to_dtype(x.dtype())?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }
}

#[derive(Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(store, &format!("{name}.down.conv"), in_ch, out_ch, 1, stride, false)?,
                BatchNorm2d::new(store, &format!("{name}.down.bn"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, false)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, false)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    max_pool: bool,
}

impl Stem {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?;
        if self.max_pool {
            // Post-ReLU values are non-negative, so zero padding acts as -inf padding.
            let padded = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
            Ok(padded.max_pool2d_with_stride(3, 2)?)
        } else {
            Ok(h)
        }
    }
}

/// Ordered stage outputs of one image.
#[derive(Debug, Clone)]
pub struct BlockTaps {
    pub maps: Vec<FeatureMap>,
    pub source_shape: (usize, usize, usize),
}

impl BlockTaps {
    /// Stage output by 1-based block index.
    pub fn block(&self, block_index: usize) -> Result<&FeatureMap> {
        check_block(block_index)?;
        Ok(&self.maps[block_index - 1])
    }
}

pub(crate) fn check_block(block_index: usize) -> Result<()> {
    if !(1..=NUM_STAGES).contains(&block_index) {
        return Err(Error::input(format!(
            "block index {block_index} outside 1..={NUM_STAGES}"
        )));
    }
    Ok(())
}

/// The black-box classifier `F_Θ`.
#[derive(Debug)]
pub struct PredictorModel {
    config: PredictorConfig,
    store: ParamStore,
    stem: Stem,
    stages: Vec<Vec<BasicBlock>>,
    classifier: Linear,
    normalization: Normalization,
}

impl PredictorModel {
    pub fn new(config: PredictorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let in_ch = config.input_shape.2;
        let w0 = config.stage_channels[0];
        let stem = match config.architecture {
            Architecture::Desk => Stem {
                conv: Conv2d::new(&mut store, "stem.conv", in_ch, w0, 3, 1, false)?,
                bn: BatchNorm2d::new(&mut store, "stem.bn", w0)?,
                max_pool: false,
            },
            Architecture::ResNet18 => Stem {
                conv: Conv2d::new(&mut store, "stem.conv", in_ch, w0, 7, 2, false)?,
                bn: BatchNorm2d::new(&mut store, "stem.bn", w0)?,
                max_pool: true,
            },
        };
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut prev = w0;
        for (s, (&width, &blocks)) in config
            .stage_channels
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{b}", s + 1);
                stage.push(BasicBlock::new(&mut store, &name, prev, width, stride)?);
                prev = width;
            }
            stages.push(stage);
        }
        let classifier = Linear::new(&mut store, "fc", prev, config.num_classes)?;
        Ok(Self {
            normalization: Normalization::identity(in_ch),
            config,
            store,
            stem,
            stages,
            classifier,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn stage_channel_dims(&self) -> [usize; NUM_STAGES] {
        self.config.stage_channels
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.config.input_shape
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        let c = self.config.input_shape.2;
        if norm.mean.len() != c || norm.std.len() != c {
            return Err(Error::input("normalization does not match channel count"));
        }
        if norm.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::input("normalization std must be positive"));
        }
        self.normalization = norm;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let (eh, ew, ec) = self.config.input_shape;
        if (h, w, c) != (eh, ew, ec) {
            return Err(Error::input(format!(
                "input is {h}x{w}x{c}, model expects {eh}x{ew}x{ec}"
            )));
        }
        Ok(())
    }

    /// Stage outputs for stages `1..=last` of a raw NCHW batch.
    pub fn taps_tensor(&self, x: &Tensor, mode: Mode, last: usize) -> Result<Vec<Tensor>> {
        check_block(last)?;
        self.check_input(x)?;
        let mut h = self.stem.forward(&self.normalization.apply(x)?, mode)?;
        let mut taps = Vec::with_capacity(last);
        for stage in &self.stages[..last] {
            for block in stage {
                h = block.forward(&h, mode)?;
            }
            taps.push(h.clone());
        }
        Ok(taps)
    }

    /// Logits `(batch, K)` and all four stage outputs of a raw NCHW batch.
    pub fn forward_tensor(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<Tensor>)> {
        let taps = self.taps_tensor(x, mode, NUM_STAGES)?;
        let pooled = nn::global_avg_pool(&taps[NUM_STAGES - 1])?;
        let logits = self.classifier.forward(&pooled)?;
        Ok((logits, taps))
    }

    /// Differentiable encoding `Ψ` of a raw `(1, C, H, W)` image in evaluation mode.
    pub fn encode_tensor(&self, x: &Tensor, block_index: usize) -> Result<Tensor> {
        let mut taps = self.taps_tensor(x, Mode::Eval, block_index)?;
        Ok(taps.pop().expect("at least one stage"))
    }
}

fn image_batch(images: &[Image], model: &PredictorModel) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let (h, w, c) = model.input_shape();
    if let Some(bad) = images.iter().find(|im| im.shape() != (h, w, c)) {
        let (bh, bw, bc) = bad.shape();
        return Err(Error::input(format!(
            "image is {bh}x{bw}x{bc}, model expects {h}x{w}x{c}"
        )));
    }
    Image::stack_tensors(images, model.dtype())
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = nn::to_vec1(t)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical(format!("non-finite {what}"), Vec::new()));
    }
    Ok(())
}

/// Evaluation-mode forward pass over a batch: logits rows and taps per image.
pub fn predictor_forward(
    images: &[Image],
    model: &PredictorModel,
) -> Result<(Vec<Vec<f64>>, Vec<BlockTaps>)> {
    let x = image_batch(images, model)?;
    let (logits, taps) = model.forward_tensor(&x, Mode::Eval)?;
    ensure_finite(&logits, "logits")?;
    for t in &taps {
        ensure_finite(t, "activations")?;
    }
    let k = model.num_classes();
    let rows = nn::to_vec1(&logits)?.chunks(k).map(<[f64]>::to_vec).collect();
    let per_image = (0..images.len())
        .map(|i| {
            let maps = taps
                .iter()
                .map(|t| FeatureMap::new(t.get(i)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(BlockTaps {
                maps,
                source_shape: model.input_shape(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, per_image))
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-sample softmax cross-entropy `-log softmax(logits)[label]`.
pub fn primary_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    if logits.len() != labels.len() {
        return Err(Error::input("logits and labels differ in batch size"));
    }
    logits
        .iter()
        .zip(labels)
        .map(|(row, &label)| {
            if label >= row.len() {
                return Err(Error::input(format!(
                    "label {label} out of range for {} classes",
                    row.len()
                )));
            }
            // Clamp rounding noise below zero.
            Ok((log_sum_exp(row) - row[label]).max(0.0))
        })
        .collect()
}

/// Differentiable per-sample cross-entropy of `(batch, K)` logits: `(batch,)`.
pub fn cross_entropy_tensor(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::input("logits and labels differ in batch size"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::input(format!("label {bad} out of range for {k} classes")));
    }
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), &DEVICE)?;
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(log_probs.gather(&idx, 1)?.squeeze(1)?.neg()?)
}

/// Encoding `Ψ` of one image at a 1-based residual stage.
pub fn encode(image: &Image, block_index: usize, model: &PredictorModel) -> Result<FeatureMap> {
    check_block(block_index)?;
    let x = image_batch(std::slice::from_ref(image), model)?;
    FeatureMap::new(model.encode_tensor(&x, block_index)?.squeeze(0)?)
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| (v - lse).exp()).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted label and class probabilities of one image.
pub fn predict_class(image: &Image, model: &PredictorModel) -> Result<(usize, Vec<f64>)> {
    let (logits, _) = predictor_forward(std::slice::from_ref(image), model)?;
    let probs = softmax(&logits[0]);
    Ok((argmax(&logits[0]), probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> PredictorModel {
        let cfg = PredictorConfig::desk(3)
            .with_input_shape(8, 8, 3)
            .with_stage_channels([4, 4, 8, 8]);
        PredictorModel::new(cfg, DType::F64, 11).unwrap()
    }

    fn noise_image(seed: u64, h: usize, w: usize) -> Image {
        let data = (0..h * w * 3)
            .map(|i| (((i as u64 + 1) * (seed * 2654435761 + 97)) % 1000) as f64 / 1000.0)
            .collect();
        Image::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn forward_shapes_and_tap_dims() {
        let model = tiny_model();
        let images = vec![noise_image(1, 8, 8), noise_image(2, 8, 8)];
        let (logits, taps) = predictor_forward(&images, &model).unwrap();
        assert_eq!(logits.len(), 2);
        assert!(logits.iter().all(|r| r.len() == 3));
        assert_eq!(taps.len(), 2);
        let dims: Vec<_> = taps[0].maps.iter().map(FeatureMap::dims).collect();
        assert_eq!(dims, vec![(4, 8, 8), (4, 4, 4), (8, 2, 2), (8, 1, 1)]);
        for w in dims.windows(2) {
            assert!(w[1].1 <= w[0].1 && w[1].2 <= w[0].2);
        }
    }

    #[test]
    fn duplicate_images_give_identical_rows() {
        let model = tiny_model();
        let im = noise_image(5, 8, 8);
        let (logits, _) = predictor_forward(&[im.clone(), im], &model).unwrap();
        assert_eq!(logits[0], logits[1]);
    }

    #[test]
    fn encode_matches_forward_taps() {
        let model = tiny_model();
        let im = noise_image(3, 8, 8);
        let (_, taps) = predictor_forward(std::slice::from_ref(&im), &model).unwrap();
        for block in 1..=NUM_STAGES {
            let e = encode(&im, block, &model).unwrap();
            assert_eq!(e.to_vec().unwrap(), taps[0].block(block).unwrap().to_vec().unwrap());
        }
        assert!(encode(&im, 0, &model).is_err());
        assert!(encode(&im, 5, &model).is_err());
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let model = tiny_model();
        let err = predictor_forward(&[noise_image(1, 4, 4)], &model).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(matches!(predictor_forward(&[], &model).unwrap_err(), Error::Input(_)));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let k = 5;
        let losses = primary_loss(&[vec![0.3; k]], &[2]).unwrap();
        assert!((losses[0] - (k as f64).ln()).abs() < 1e-12);
        let l = primary_loss(&[vec![2.0, 0.0]], &[0]).unwrap()[0];
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.126_928).abs() < 1e-6);
        let dominant = primary_loss(&[vec![1e3, 0.0, -1.0]], &[0]).unwrap()[0];
        assert!(dominant < 1e-12);
        assert!(primary_loss(&[vec![0.0, 0.0]], &[2]).is_err());
    }

    #[test]
    fn tensor_cross_entropy_matches_scalar() {
        let rows = vec![vec![0.1, -1.2, 2.0], vec![3.0, 0.5, 0.5]];
        let labels = [2, 1];
        let t = Tensor::from_vec(rows.concat(), (2, 3), &DEVICE).unwrap();
        let got = nn::to_vec1(&cross_entropy_tensor(&t, &labels).unwrap()).unwrap();
        let want = primary_loss(&rows, &labels).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        let p = softmax(&[0.0; 4]);
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn resnet18_layout_builds() {
        let cfg = PredictorConfig::resnet18(7).with_input_shape(64, 64, 3);
        let model = PredictorModel::new(cfg, DType::F32, 0).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &DEVICE).unwrap();
        let (logits, taps) = model.forward_tensor(&x, Mode::Eval).unwrap();
        assert_eq!(logits.dims(), &[1, 7]);
        let dims: Vec<_> = taps.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![vec![1, 64, 16, 16], vec![1, 128, 8, 8], vec![1, 256, 4, 4], vec![1, 512, 2, 2]]
        );
    }
}
