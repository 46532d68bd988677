//! Independent oracles shared by the integration tests: a term-by-term
//! ranking evaluator and central finite differences at float64.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use deep_preimage::dip::{DipGenerator, GeneratorConfig};
use deep_preimage::estimator::{self, LossEstimatorHead, Pairing};
use deep_preimage::inversion::{self, ObjectiveTerms};
use deep_preimage::model::{self, PredictorConfig, PredictorModel};
use deep_preimage::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Hinge terms evaluated one by one, with the pair list built here rather
/// than taken from the library.
pub fn brute_force_ranking(ell: &[f64], est: &[f64], gamma: f64, pairing: Pairing) -> f64 {
    let n = ell.len();
    let mut pairs = Vec::new();
    match pairing {
        Pairing::Halves => {
            let m = n / 2;
            for i in 0..m {
                pairs.push((i, i + m));
                pairs.push((i + m, i));
            }
        }
        Pairing::AllPairs => {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        pairs.push((i, j));
                    }
                }
            }
        }
    }
    let mut sum = 0.0;
    for &(i, j) in &pairs {
        let term = if ell[i] > ell[j] {
            -(est[i] - est[j]) + gamma
        } else {
            gamma
        };
        sum += if term > 0.0 { term } else { 0.0 };
    }
    sum / pairs.len() as f64
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute norm when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], coords: &[usize]) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += FD_STEP;
            minus[i] -= FD_STEP;
            (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn analytic_gradient(x: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let var = Var::from_tensor(&Tensor::from_slice(x, shape, &Device::Cpu).unwrap()).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    flat(grads.get(var.as_tensor()).unwrap())
}

pub fn tiny_predictor(size: usize, seed: u64) -> (PredictorModel, LossEstimatorHead) {
    let cfg = PredictorConfig::desk(3)
        .with_input_shape(size, size, 3)
        .with_stage_channels([4, 4, 6, 6]);
    let model = PredictorModel::new(cfg, DType::F64, seed).unwrap();
    let mut head = LossEstimatorHead::new([4, 4, 6, 6], 8, DType::F64, seed + 1).unwrap();
    head.mark_trained();
    (model, head)
}

/// Cross-entropy gradient w.r.t. logits.
pub fn primary_loss_error() -> f64 {
    let (b, k) = (4, 5);
    let logits = uniform(b * k, -3.0, 3.0, 1);
    let labels = [0usize, 3, 4, 1];
    let ana = analytic_gradient(&logits, &[b, k], |t| {
        model::cross_entropy_tensor(t, &labels).unwrap().sum_all().unwrap()
    });
    let f = |x: &[f64]| {
        let rows: Vec<Vec<f64>> = x.chunks(k).map(<[f64]>::to_vec).collect();
        model::primary_loss(&rows, &labels).unwrap().iter().sum()
    };
    let coords: Vec<usize> = (0..b * k).collect();
    relative_error(&ana, &central_difference(f, &logits, &coords))
}

/// Ranking-loss gradient w.r.t. the estimates, at a point whose hinges are
/// all at least 0.05 away from their kinks.
pub fn ranking_loss_error() -> f64 {
    let n = 8;
    let ell = uniform(n, 0.0, 2.0, 2);
    let mut seed = 3;
    let est = loop {
        let est = uniform(n, -1.0, 1.0, seed);
        let clear = (0..n).all(|i| {
            (0..n).all(|j| i == j || ell[i] <= ell[j] || (-(est[i] - est[j]) + 1.0).abs() > 0.05)
        });
        if clear {
            break est;
        }
        seed += 1;
    };
    let mut worst: f64 = 0.0;
    for pairing in [Pairing::Halves, Pairing::AllPairs] {
        let ana = analytic_gradient(&est, &[n], |t| {
            estimator::ranking_loss_tensor(&ell, t, 1.0, pairing).unwrap()
        });
        let f = |x: &[f64]| estimator::ranking_loss(&ell, x, 1.0, pairing).unwrap();
        let coords: Vec<usize> = (0..n).collect();
        worst = worst.max(relative_error(&ana, &central_difference(f, &est, &coords)));
    }
    worst
}

fn image_from_nchw(x: &[f64], h: usize, w: usize, c: usize) -> Image {
    let t = Tensor::from_slice(x, (1, c, h, w), &Device::Cpu).unwrap();
    Image::from_tensor(&t).unwrap()
}

/// `(ℓ̂(x) − ℓ_t)²` gradient w.r.t. the pixels of an 8×8 image.
pub fn loss_regularizer_error() -> f64 {
    let (model, head) = tiny_predictor(8, 4);
    let n = 3 * 8 * 8;
    let x = uniform(n, 0.1, 0.9, 5);
    let ana = analytic_gradient(&x, &[1, 3, 8, 8], |t| {
        inversion::loss_regularizer_tensor(t, &model, &head, 0.0).unwrap()
    });
    let f = |v: &[f64]| inversion::loss_regularizer(&image_from_nchw(v, 8, 8, 3), &model, &head, 0.0).unwrap();
    let coords: Vec<usize> = (0..n).collect();
    relative_error(&ana, &central_difference(f, &x, &coords))
}

pub fn tv_error() -> f64 {
    let n = 3 * 6 * 5;
    let x = uniform(n, 0.0, 1.0, 6);
    let ana = analytic_gradient(&x, &[1, 3, 6, 5], |t| inversion::tv_tensor(t).unwrap());
    let f = |v: &[f64]| inversion::tv_regularizer(&image_from_nchw(v, 6, 5, 3));
    let coords: Vec<usize> = (0..n).collect();
    relative_error(&ana, &central_difference(f, &x, &coords))
}

pub fn alpha_norm_error() -> f64 {
    let n = 3 * 5 * 5;
    let x = uniform(n, 0.05, 1.0, 7);
    let ana = analytic_gradient(&x, &[1, 3, 5, 5], |t| inversion::alpha_norm_tensor(t, 6.0).unwrap());
    let f = |v: &[f64]| inversion::alpha_norm_regularizer(&image_from_nchw(v, 5, 5, 3), 6.0);
    let coords: Vec<usize> = (0..n).collect();
    relative_error(&ana, &central_difference(f, &x, &coords))
}

/// Gradient of encoding distance + λ1·M + λ2·CE w.r.t. every generator
/// parameter of a two-level generator producing 4×4 images.
pub fn composite_error() -> f64 {
    let (model, head) = tiny_predictor(4, 8);
    let reference = image_from_nchw(&uniform(48, 0.0, 1.0, 9), 4, 4, 3);
    let target = model::encode(&reference, 1, &model)
        .unwrap()
        .tensor()
        .unsqueeze(0)
        .unwrap();
    let mut cfg = GeneratorConfig::new((4, 4, 3)).with_widths(vec![3, 4]).with_noise_channels(2);
    cfg.skip_channels = 2;
    let gen = DipGenerator::new(cfg, DType::F64, 10).unwrap();
    let terms = ObjectiveTerms {
        block_index: 1,
        lambda_estimator: 0.02,
        target_loss: 0.0,
        lambda_target: 0.1,
        target_class: Some(2),
        explicit: None,
    };
    let objective = || {
        let x = gen.forward(gen.noise()).unwrap();
        inversion::composite_objective(&x, &target, &model, &head, &terms).unwrap()
    };
    let grads = objective().backward().unwrap();
    let (mut ana, mut fd) = (Vec::new(), Vec::new());
    for (_, var) in gen.params().named_parameters() {
        let original = var.as_tensor().copy().unwrap();
        let shape = original.dims().to_vec();
        let values = flat(&original);
        ana.extend(flat(grads.get(var.as_tensor()).unwrap()));
        for i in 0..values.len() {
            let eval = |delta: f64| {
                let mut v = values.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                flat(&objective())[0]
            };
            let d = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            fd.push(d);
        }
        var.set(&original).unwrap();
    }
    relative_error(&ana, &fd)
}
