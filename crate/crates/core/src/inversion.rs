//! Pre-image recovery and counterfactual generation.
//!
//! Every mode minimizes the squared encoding distance to a target feature
//! map at one stage of the predictor. The generator modes search over the
//! generator parameters; the explicit modes search over pixels directly with
//! a hand-made regularizer. Optional terms:
//!
//! * `λ1 · (ℓ̂(x) − ℓ_t)²` pulls the loss estimate towards a target level,
//! * `λ2 · CE(F(x), y_t)` drives the prediction towards a target class.
//!
//! Terms whose weight is zero are left out of the computation graph
//! entirely, so degenerate weights reproduce the simpler objectives exactly.

use candle_core::{Tensor, Var};
use candle_nn::Optimizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, DifferenceMap};
use crate::dip::{DipGenerator, GeneratorConfig};
use crate::error::{Error, Result};
use crate::estimator::LossEstimatorHead;
use crate::model::{self, check_block, PredictorModel, DEFAULT_BLOCK};
use crate::nn::{self, Mode};
use crate::raster::{FeatureMap, Image};

pub const DEFAULT_ITERATIONS: usize = 5000;
pub const DEFAULT_STEP_SIZE: f64 = 0.01;
pub const DEFAULT_LAMBDA_ESTIMATOR: f64 = 0.02;
pub const DEFAULT_LAMBDA_TARGET: f64 = 0.1;
pub const DEFAULT_TV_WEIGHT: f64 = 1e-4;
pub const DEFAULT_ALPHA_WEIGHT: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 6.0;
pub const TV_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionMode {
    DipOnly,
    DipRegularized,
    Counterfactual,
    ExplicitTv,
    ExplicitAlpha,
}

impl InversionMode {
    pub fn name(self) -> &'static str {
        match self {
            InversionMode::DipOnly => "dip_only",
            InversionMode::DipRegularized => "dip_regularized",
            InversionMode::Counterfactual => "counterfactual",
            InversionMode::ExplicitTv => "explicit_tv",
            InversionMode::ExplicitAlpha => "explicit_alpha",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dip_only" => Ok(InversionMode::DipOnly),
            "dip_regularized" => Ok(InversionMode::DipRegularized),
            "counterfactual" => Ok(InversionMode::Counterfactual),
            "explicit_tv" => Ok(InversionMode::ExplicitTv),
            "explicit_alpha" => Ok(InversionMode::ExplicitAlpha),
            other => Err(Error::input(format!("unknown inversion mode `{other}`"))),
        }
    }

    fn uses_generator(self) -> bool {
        !matches!(self, InversionMode::ExplicitTv | InversionMode::ExplicitAlpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub mode: InversionMode,
    /// 1-based predictor stage used as the encoding.
    pub block_index: usize,
    pub iterations: usize,
    pub step_size: f64,
    /// Weight of the loss-estimator term.
    pub lambda_estimator: f64,
    /// Weight of the targeted cross-entropy term.
    pub lambda_target: f64,
    pub target_loss: f64,
    pub target_class: Option<usize>,
    /// Weight of the explicit regularizer; `None` picks the mode default.
    pub lambda_explicit: Option<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub generator_widths: Vec<usize>,
    pub noise_jitter: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            mode: InversionMode::DipOnly,
            block_index: DEFAULT_BLOCK,
            iterations: DEFAULT_ITERATIONS,
            step_size: DEFAULT_STEP_SIZE,
            lambda_estimator: DEFAULT_LAMBDA_ESTIMATOR,
            lambda_target: DEFAULT_LAMBDA_TARGET,
            target_loss: 0.0,
            target_class: None,
            lambda_explicit: None,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            generator_widths: vec![16, 32, 64, 128],
            noise_jitter: 0.0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        check_block(self.block_index)?;
        if self.iterations == 0 {
            return Err(Error::input("iteration budget must be at least 1"));
        }
        if !(self.lambda_estimator >= 0.0 && self.lambda_target >= 0.0) {
            return Err(Error::input("objective weights must be non-negative"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::input("step size must be positive"));
        }
        if self.mode == InversionMode::Counterfactual && self.target_class.is_none() {
            return Err(Error::input("counterfactual mode requires a target class"));
        }
        if matches!(self.lambda_explicit, Some(l) if !(l >= 0.0)) {
            return Err(Error::input("explicit regularizer weight must be non-negative"));
        }
        if self.mode == InversionMode::ExplicitAlpha && !(self.alpha > 0.0) {
            return Err(Error::input("alpha must be positive"));
        }
        Ok(())
    }

    /// Weight of the explicit regularizer actually used.
    pub fn explicit_weight(&self) -> f64 {
        match (self.lambda_explicit, self.mode) {
            (Some(l), _) => l,
            (None, InversionMode::ExplicitAlpha) => DEFAULT_ALPHA_WEIGHT,
            (None, _) => DEFAULT_TV_WEIGHT,
        }
    }

    /// `key = value` pairs describing every field.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        let widths = self
            .generator_widths
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("mode", self.mode.name().to_string()),
            ("block", self.block_index.to_string()),
            ("iters", self.iterations.to_string()),
            ("lr", self.step_size.to_string()),
            ("lambda1", self.lambda_estimator.to_string()),
            ("lambda2", self.lambda_target.to_string()),
            ("target_loss", self.target_loss.to_string()),
            (
                "target_class",
                self.target_class.map(|c| c.to_string()).unwrap_or_default(),
            ),
            ("lambda_explicit", self.explicit_weight().to_string()),
            ("alpha", self.alpha.to_string()),
            ("seed", self.seed.to_string()),
            ("generator_widths", widths),
            ("noise_jitter", self.noise_jitter.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreimageResult {
    pub preimage: Image,
    /// Objective value at every step, evaluated before that step's update.
    pub objective_trajectory: Vec<f64>,
    /// 0-based step whose iterate is returned.
    pub best_iteration: usize,
    pub final_encoding_distance: f64,
    pub final_estimated_loss: f64,
    pub predicted_class: usize,
    pub psnr_vs_reference: Option<f64>,
}

impl PreimageResult {
    pub fn best_objective(&self) -> f64 {
        self.objective_trajectory[self.best_iteration]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualResult {
    pub result: PreimageResult,
    pub source_class: usize,
    pub target_class: usize,
    /// `|x* − x0|` summed over channels.
    pub difference: DifferenceMap,
}

impl CounterfactualResult {
    pub fn flipped(&self) -> bool {
        self.result.predicted_class == self.target_class
    }
}

/// Mean squared difference between two feature maps.
pub fn encoding_distance(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::input(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (va, vb) = (a.to_vec()?, b.to_vec()?);
    let sum: f64 = va.iter().zip(&vb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / va.len() as f64)
}

fn encoding_distance_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

fn require_trained(head: &LossEstimatorHead) -> Result<()> {
    if !head.is_trained() {
        return Err(Error::State(
            "loss estimator head has not been trained or loaded".into(),
        ));
    }
    Ok(())
}

/// Differentiable `(ℓ̂(x) − ℓ_t)²` for a raw `(1, C, H, W)` image.
pub fn loss_regularizer_tensor(
    x: &Tensor,
    model: &PredictorModel,
    head: &LossEstimatorHead,
    target_loss: f64,
) -> Result<Tensor> {
    require_trained(head)?;
    let (_, taps) = model.forward_tensor(x, Mode::Eval)?;
    estimator_penalty(&head.forward_tensor(&taps)?, target_loss)
}

fn estimator_penalty(estimate: &Tensor, target_loss: f64) -> Result<Tensor> {
    Ok((estimate - target_loss)?.sqr()?.sum_all()?)
}

pub fn loss_regularizer(
    x: &Image,
    model: &PredictorModel,
    head: &LossEstimatorHead,
    target_loss: f64,
) -> Result<f64> {
    nn::scalar(&loss_regularizer_tensor(
        &x.to_tensor(model.dtype())?,
        model,
        head,
        target_loss,
    )?)
}

/// Smoothed isotropic total variation of an NCHW tensor:
/// `Σ sqrt(dx² + dy² + ε²) − ε` with forward differences and zero
/// difference past the last row/column.
pub fn tv_tensor(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dx = if w > 1 {
        (x.narrow(3, 1, w - 1)? - x.narrow(3, 0, w - 1)?)?.pad_with_zeros(3, 0, 1)?
    } else {
        x.zeros_like()?
    };
    let dy = if h > 1 {
        (x.narrow(2, 1, h - 1)? - x.narrow(2, 0, h - 1)?)?.pad_with_zeros(2, 0, 1)?
    } else {
        x.zeros_like()?
    };
    let norm = ((dx.sqr()? + dy.sqr()?)? + TV_EPSILON * TV_EPSILON)?.sqrt()?;
    Ok((norm - TV_EPSILON)?.sum_all()?)
}

/// `mean(|x|^α)` of a tensor.
pub fn alpha_norm_tensor(x: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok(x.abs()?.powf(alpha)?.mean_all()?)
}

pub fn tv_regularizer(x: &Image) -> f64 {
    let (h, w, c) = x.shape();
    let mut total = 0.0;
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let v = x.get(y, xx, ch);
                let dx = if xx + 1 < w { x.get(y, xx + 1, ch) - v } else { 0.0 };
                let dy = if y + 1 < h { x.get(y + 1, xx, ch) - v } else { 0.0 };
                total += (dx * dx + dy * dy + TV_EPSILON * TV_EPSILON).sqrt() - TV_EPSILON;
            }
        }
    }
    total
}

pub fn alpha_norm_regularizer(x: &Image, alpha: f64) -> f64 {
    x.data().iter().map(|v| v.abs().powf(alpha)).sum::<f64>() / x.data().len() as f64
}

/// Weights and targets of the composite objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub block_index: usize,
    pub lambda_estimator: f64,
    pub target_loss: f64,
    pub lambda_target: f64,
    pub target_class: Option<usize>,
    pub explicit: Option<Explicit>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Explicit {
    Tv { weight: f64 },
    Alpha { weight: f64, alpha: f64 },
}

impl ObjectiveTerms {
    pub fn from_config(config: &InversionConfig) -> Self {
        let (lambda_estimator, lambda_target) = match config.mode {
            InversionMode::DipOnly | InversionMode::ExplicitTv | InversionMode::ExplicitAlpha => (0.0, 0.0),
            InversionMode::DipRegularized => (config.lambda_estimator, 0.0),
            InversionMode::Counterfactual => (config.lambda_estimator, config.lambda_target),
        };
        let explicit = match config.mode {
            InversionMode::ExplicitTv => Some(Explicit::Tv {
                weight: config.explicit_weight(),
            }),
            InversionMode::ExplicitAlpha => Some(Explicit::Alpha {
                weight: config.explicit_weight(),
                alpha: config.alpha,
            }),
            _ => None,
        };
        Self {
            block_index: config.block_index,
            lambda_estimator,
            target_loss: config.target_loss,
            lambda_target,
            target_class: config.target_class,
            explicit,
        }
    }
}

/// Composite objective for a raw `(1, C, H, W)` image against a
/// `(1, C', H', W')` target encoding.
pub fn composite_objective(
    x: &Tensor,
    target: &Tensor,
    model: &PredictorModel,
    head: &LossEstimatorHead,
    terms: &ObjectiveTerms,
) -> Result<Tensor> {
    let needs_head = terms.lambda_estimator > 0.0;
    let needs_logits = terms.lambda_target > 0.0;
    let (encoding, full) = if needs_head || needs_logits {
        let (logits, taps) = model.forward_tensor(x, Mode::Eval)?;
        (taps[terms.block_index - 1].clone(), Some((logits, taps)))
    } else {
        (model.encode_tensor(x, terms.block_index)?, None)
    };
    if encoding.dims() != target.dims() {
        return Err(Error::input(format!(
            "target encoding has shape {:?} but block {} produces {:?}",
            target.dims(),
            terms.block_index,
            encoding.dims()
        )));
    }
    let mut total = encoding_distance_tensor(&encoding, target)?;
    if let Some((logits, taps)) = &full {
        if needs_head {
            let penalty = estimator_penalty(&head.forward_tensor(taps)?, terms.target_loss)?;
            total = (total + (penalty * terms.lambda_estimator)?)?;
        }
        if needs_logits {
            let class = terms
                .target_class
                .ok_or_else(|| Error::input("targeted cross-entropy needs a target class"))?;
            let ce = model::cross_entropy_tensor(logits, &[class])?.sum_all()?;
            total = (total + (ce * terms.lambda_target)?)?;
        }
    }
    match terms.explicit {
        Some(Explicit::Tv { weight }) if weight > 0.0 => {
            total = (total + (tv_tensor(x)? * weight)?)?;
        }
        Some(Explicit::Alpha { weight, alpha }) if weight > 0.0 => {
            total = (total + (alpha_norm_tensor(x, alpha)? * weight)?)?;
        }
        _ => {}
    }
    Ok(total)
}

struct Search {
    best_x: Tensor,
    best_iteration: usize,
    trajectory: Vec<f64>,
}

fn record(search: &mut Option<Search>, trajectory: &mut Vec<f64>, value: f64, x: &Tensor, t: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::numerical(
            format!("objective is {value} at step {t}"),
            std::mem::take(trajectory),
        ));
    }
    trajectory.push(value);
    let improved = match search {
        Some(s) => value < trajectory[s.best_iteration],
        None => true,
    };
    if improved {
        *search = Some(Search {
            best_x: x.detach(),
            best_iteration: t,
            trajectory: Vec::new(),
        });
    }
    Ok(())
}

fn search_generator(
    target: &Tensor,
    model: &PredictorModel,
    head: &LossEstimatorHead,
    config: &InversionConfig,
    terms: &ObjectiveTerms,
) -> Result<Search> {
    let gen_config = GeneratorConfig {
        noise_jitter: config.noise_jitter,
        ..GeneratorConfig::new(model.input_shape()).with_widths(config.generator_widths.clone())
    };
    let generator = DipGenerator::new(gen_config, model.dtype(), config.seed)?;
    let mut opt = nn::adam(generator.params().trainable(), config.step_size)?;
    let mut trajectory = Vec::with_capacity(config.iterations);
    let mut best = None;
    for t in 0..config.iterations {
        let x = generator.forward(&generator.input_for_step(t)?)?;
        let objective = composite_objective(&x, target, model, head, terms)?;
        record(&mut best, &mut trajectory, nn::scalar(&objective)?, &x, t)?;
        opt.backward_step(&objective)?;
    }
    let mut best = best.expect("at least one iteration");
    best.trajectory = trajectory;
    Ok(best)
}

fn search_pixels(
    target: &Tensor,
    model: &PredictorModel,
    head: &LossEstimatorHead,
    config: &InversionConfig,
    terms: &ObjectiveTerms,
) -> Result<Search> {
    let (h, w, c) = model.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init: Vec<f64> = (0..c * h * w).map(|_| 0.5 + rng.random_range(-0.05..0.05)).collect();
    let x = Var::from_tensor(&Tensor::from_vec(init, (1, c, h, w), &nn::DEVICE)?.to_dtype(model.dtype())?)?;
    let mut opt = nn::adam(vec![x.clone()], config.step_size)?;
    let mut trajectory = Vec::with_capacity(config.iterations);
    let mut best = None;
    for t in 0..config.iterations {
        let objective = composite_objective(x.as_tensor(), target, model, head, terms)?;
        record(&mut best, &mut trajectory, nn::scalar(&objective)?, x.as_tensor(), t)?;
        opt.backward_step(&objective)?;
        // Projected step keeps pixels in the image range.
        x.set(&x.as_tensor().clamp(0.0, 1.0)?)?;
    }
    let mut best = best.expect("at least one iteration");
    best.trajectory = trajectory;
    Ok(best)
}

/// Fits an image whose encoding at `config.block_index` matches
/// `target_encoding`, returning the lowest-objective iterate.
pub fn recover_preimage(
    target_encoding: &FeatureMap,
    reference: Option<&Image>,
    model: &PredictorModel,
    head: &LossEstimatorHead,
    config: &InversionConfig,
) -> Result<PreimageResult> {
    config.validate()?;
    let terms = ObjectiveTerms::from_config(config);
    if terms.lambda_estimator > 0.0 {
        require_trained(head)?;
    }
    if let Some(class) = terms.target_class.filter(|_| terms.lambda_target > 0.0) {
        if class >= model.num_classes() {
            return Err(Error::input(format!(
                "target class {class} out of range for {} classes",
                model.num_classes()
            )));
        }
    }
    if let Some(r) = reference {
        if r.shape() != model.input_shape() {
            return Err(Error::input("reference image does not match the model input shape"));
        }
    }
    let target = target_encoding.tensor().to_dtype(model.dtype())?.unsqueeze(0)?;
    let search = if config.mode.uses_generator() {
        search_generator(&target, model, head, config, &terms)?
    } else {
        search_pixels(&target, model, head, config, &terms)?
    };

    let best = &search.best_x;
    let (logits, taps) = model.forward_tensor(best, Mode::Eval)?;
    let encoding = FeatureMap::new(taps[config.block_index - 1].squeeze(0)?)?;
    let estimate = nn::scalar(&head.forward_tensor(&taps)?.squeeze(0)?)?;
    let preimage = Image::from_tensor(best)?;
    let psnr_vs_reference = reference.map(|r| data::psnr(&preimage, r)).transpose()?;
    Ok(PreimageResult {
        final_encoding_distance: encoding_distance(&encoding, target_encoding)?,
        final_estimated_loss: estimate,
        predicted_class: model::argmax(&nn::to_vec1(&logits)?),
        psnr_vs_reference,
        preimage,
        objective_trajectory: search.trajectory,
        best_iteration: search.best_iteration,
    })
}

/// Counterfactual for `source`: stays close to its encoding while moving the
/// prediction to `target_class`.
pub fn generate_counterfactual(
    source: &Image,
    target_class: usize,
    model: &PredictorModel,
    head: &LossEstimatorHead,
    config: &InversionConfig,
) -> Result<CounterfactualResult> {
    if target_class >= model.num_classes() {
        return Err(Error::input(format!(
            "target class {target_class} out of range for {} classes",
            model.num_classes()
        )));
    }
    let (source_class, _) = model::predict_class(source, model)?;
    if source_class == target_class {
        return Err(Error::input(format!(
            "target class {target_class} is already the prediction for this image"
        )));
    }
    let config = InversionConfig {
        mode: InversionMode::Counterfactual,
        target_class: Some(target_class),
        ..config.clone()
    };
    let target = model::encode(source, config.block_index, model)?;
    let result = recover_preimage(&target, Some(source), model, head, &config)?;
    let difference = data::difference_map(&result.preimage, source)?;
    Ok(CounterfactualResult {
        result,
        source_class,
        target_class,
        difference,
    })
}
