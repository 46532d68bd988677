//! Untrained encoder–decoder generator used as an implicit image prior.
//!
//! The generator maps a fixed noise tensor `z` to an image through `depth`
//! strided downsampling levels and `depth` bilinear upsampling levels, with a
//! 1x1 skip branch from every downsampling resolution into the matching
//! upsampling level. Its sigmoid output lies in `[0, 1]`.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, Mode, ParamStore, DEVICE};
use crate::raster::Image;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// `(height, width, channels)`
    pub output_shape: (usize, usize, usize),
    /// Channel width per level; its length is the depth.
    pub widths: Vec<usize>,
    pub noise_channels: usize,
    pub skip_channels: usize,
    /// `z` is drawn uniformly from `[0, noise_scale]`.
    pub noise_scale: f64,
    /// Std of per-step Gaussian perturbation of `z`; 0 disables it.
    pub noise_jitter: f64,
}

impl GeneratorConfig {
    pub fn new(output_shape: (usize, usize, usize)) -> Self {
        Self {
            output_shape,
            widths: vec![16, 32, 64, 128],
            noise_channels: 32,
            skip_channels: 4,
            noise_scale: 0.1,
            noise_jitter: 0.0,
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    pub fn with_noise_channels(mut self, channels: usize) -> Self {
        self.noise_channels = channels;
        self
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    fn validate(&self) -> Result<()> {
        let (h, w, c) = self.output_shape;
        let depth = self.depth();
        if depth == 0 || self.widths.contains(&0) {
            return Err(Error::input("generator needs at least one level of positive width"));
        }
        if c == 0 || self.noise_channels == 0 || self.skip_channels == 0 {
            return Err(Error::input("generator channel counts must be positive"));
        }
        let factor = 1usize << depth;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::input(format!(
                "output {h}x{w} is not divisible by 2^{depth} = {factor}"
            )));
        }
        if !(self.noise_jitter >= 0.0 && self.noise_jitter.is_finite()) {
            return Err(Error::input("noise jitter must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct ConvUnit {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvUnit {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, true)?,
            bn: BatchNorm2d::batch_stats_only(store, &format!("{name}.bn"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nn::leaky_relu(&self.bn.forward(&self.conv.forward(x)?, Mode::Train)?, LEAKY_SLOPE)
    }
}

#[derive(Debug)]
struct Level {
    down: [ConvUnit; 2],
    skip: ConvUnit,
    up: [ConvUnit; 2],
}

/// Generator `x = g(θ_g; z)` with its fixed noise input.
#[derive(Debug)]
pub struct DipGenerator {
    config: GeneratorConfig,
    store: ParamStore,
    levels: Vec<Level>,
    output: Conv2d,
    noise: Tensor,
    seed: u64,
}

impl DipGenerator {
    pub fn new(config: GeneratorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let (h, w, c) = config.output_shape;
        let depth = config.depth();
        let mut levels = Vec::with_capacity(depth);
        for i in 0..depth {
            let in_ch = if i == 0 { config.noise_channels } else { config.widths[i - 1] };
            let width = config.widths[i];
            let deeper = if i + 1 < depth { config.widths[i + 1] } else { width };
            let name = format!("level{i}");
            levels.push(Level {
                down: [
                    ConvUnit::new(&mut store, &format!("{name}.down0"), in_ch, width, 3, 2)?,
                    ConvUnit::new(&mut store, &format!("{name}.down1"), width, width, 3, 1)?,
                ],
                skip: ConvUnit::new(&mut store, &format!("{name}.skip"), in_ch, config.skip_channels, 1, 1)?,
                up: [
                    ConvUnit::new(
                        &mut store,
                        &format!("{name}.up0"),
                        deeper + config.skip_channels,
                        width,
                        3,
                        1,
                    )?,
                    ConvUnit::new(&mut store, &format!("{name}.up1"), width, width, 1, 1)?,
                ],
            });
        }
        let output = Conv2d::new(&mut store, "output", config.widths[0], c, 1, 1, true)?;

        let n = config.noise_channels * h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=config.noise_scale)).collect();
        let noise = Tensor::from_vec(values, (1, config.noise_channels, h, w), &DEVICE)?.to_dtype(dtype)?;
        Ok(Self {
            config,
            store,
            levels,
            output,
            noise,
            seed,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn noise(&self) -> &Tensor {
        &self.noise
    }

    /// Network input at optimization step `step`: `z` itself unless jitter
    /// is enabled, in which case a step-seeded perturbation is added.
    pub fn input_for_step(&self, step: usize) -> Result<Tensor> {
        if self.config.noise_jitter == 0.0 {
            return Ok(self.noise.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(step as u64 + 1));
        let dist = Normal::new(0.0, self.config.noise_jitter).map_err(|e| Error::input(e.to_string()))?;
        let jitter: Vec<f64> = (0..self.noise.elem_count()).map(|_| dist.sample(&mut rng)).collect();
        let jitter = Tensor::from_vec(jitter, self.noise.dims(), &DEVICE)?.to_dtype(self.noise.dtype())?;
        Ok((&self.noise + jitter)?)
    }

    /// Differentiable output `(1, C, H, W)` for a given network input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut h = input.clone();
        for level in &self.levels {
            skips.push(level.skip.forward(&h)?);
            h = level.down[1].forward(&level.down[0].forward(&h)?)?;
        }
        for (level, skip) in self.levels.iter().zip(skips).rev() {
            let up = nn::upsample_bilinear2x(&h)?;
            let joined = Tensor::cat(&[&up, &skip], 1)?;
            h = level.up[1].forward(&level.up[0].forward(&joined)?)?;
        }
        Ok(candle_nn::ops::sigmoid(&self.output.forward(&h)?)?)
    }

    /// Output tensor for the stored `z`.
    pub fn generate_tensor(&self) -> Result<Tensor> {
        self.forward(&self.noise)
    }
}

/// Generator of the default desk-scale configuration in `f32`.
pub fn init_generator(output_shape: (usize, usize, usize), seed: u64) -> Result<DipGenerator> {
    DipGenerator::new(GeneratorConfig::new(output_shape), DType::F32, seed)
}

/// Current output image of the generator.
pub fn generate(generator: &DipGenerator) -> Result<Image> {
    Image::from_tensor(&generator.generate_tensor()?)
}
