//! Small layer toolkit on top of `candle_core` tensors.
//!
//! Convolutions are lowered to a shifted-view im2col followed by one matrix
//! product, and bilinear upsampling to two interpolation-matrix products, so
//! that every layer is differentiable through candle's autograd on the CPU in
//! both `f32` and `f64`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub(crate) const DEVICE: Device = Device::Cpu;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Named parameters and buffers of one network, created from a seeded RNG.
///
/// Trainable parameters go to the optimizer; buffers (batch-norm running
/// statistics) are only written by training-mode forward passes. Both are
/// persisted by checkpoints.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &DEVICE)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::input(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::State(format!("duplicate buffer name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![value; n], shape, &DEVICE)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameters and buffers, each prefixed with `prefix`.
    pub fn export(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| Ok((format!("{prefix}{k}"), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrite every parameter and buffer from `lookup`, which is queried
    /// with `prefix + name`.
    pub fn import(
        &self,
        prefix: &str,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<()> {
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            let key = format!("{prefix}{k}");
            let t = lookup(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.dims() != v.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// 2-D convolution with "same"-style padding `kernel / 2`.
///
/// The weight is stored as `(out, in * k * k)` in `(in, ky, kx)` order.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) || stride == 0 {
            return Err(Error::input(format!(
                "conv `{name}`: kernel must be odd and stride positive"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        // He initialization for rectifier networks.
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = store.normal(&format!("{name}.weight"), &[out_channels, fan_in], std)?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[out_channels], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_size(&self, size: usize) -> usize {
        let pad = self.kernel / 2;
        (size + 2 * pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::input(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let (k, s) = (self.kernel, self.stride);
        let pad = k / 2;
        let cols = if k == 1 && s == 1 {
            x.reshape((b, c, h * w))?
        } else {
            // Extra trailing padding so every strided window view has length s * out.
            let extra_h = (s * ho + k - 1).saturating_sub(h + 2 * pad);
            let extra_w = (s * wo + k - 1).saturating_sub(w + 2 * pad);
            let xp = x
                .pad_with_zeros(2, pad, pad + extra_h)?
                .pad_with_zeros(3, pad, pad + extra_w)?;
            let mut shifted = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    let view = xp.narrow(2, dy, s * ho)?.narrow(3, dx, s * wo)?;
                    let view = if s == 1 {
                        view
                    } else {
                        view.reshape((b, c, ho, s, wo, s))?
                            .narrow(3, 0, 1)?
                            .narrow(5, 0, 1)?
                            .reshape((b, c, ho, wo))?
                    };
                    shifted.push(view);
                }
            }
            Tensor::stack(&shifted, 2)?.reshape((b, c * k * k, ho * wo))?
        };
        // One 2-D product over the whole batch: (O, CKK) x (CKK, B*HW).
        let cols = cols.transpose(0, 1)?.reshape((c * k * k, b * ho * wo))?;
        let y = self
            .weight
            .as_tensor()
            .matmul(&cols)?
            .reshape((self.out_channels, b, ho, wo))?
            .transpose(0, 1)?
            .contiguous()?;
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Whether batch-norm uses batch statistics (and updates running ones) or
/// the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running: Option<(Var, Var)>,
    channels: usize,
}

impl BatchNorm2d {
    /// Batch-norm with running statistics for evaluation mode.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let mut bn = Self::batch_stats_only(store, name, channels)?;
        let mean = store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?;
        let var = store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?;
        bn.running = Some((mean, var));
        Ok(bn)
    }

    /// Batch-norm that always normalizes with the statistics of the current
    /// input and keeps no state, as used by the image-prior generator.
    pub fn batch_stats_only(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            beta: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            running: None,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.channels;
        let normalized = match (&self.running, mode) {
            (Some((rm, rv)), Mode::Eval) => {
                let mean = rm.as_tensor().reshape((1, c, 1, 1))?;
                let std = (rv.as_tensor().reshape((1, c, 1, 1))? + BN_EPS)?.sqrt()?;
                x.broadcast_sub(&mean)?.broadcast_div(&std)?
            }
            _ => {
                let (b, _, h, w) = x.dims4()?;
                let n = (b * h * w) as f64;
                let mean = x.sum_keepdim(0)?.sum_keepdim(2)?.sum_keepdim(3)?.affine(1.0 / n, 0.0)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered
                    .sqr()?
                    .sum_keepdim(0)?
                    .sum_keepdim(2)?
                    .sum_keepdim(3)?
                    .affine(1.0 / n, 0.0)?;
                if let (Some((rm, rv)), Mode::Train) = (&self.running, mode) {
                    let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                    let new_mean = ((rm.as_tensor() * (1.0 - BN_MOMENTUM))?
                        + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
                    let new_var = ((rv.as_tensor() * (1.0 - BN_MOMENTUM))?
                        + (var.detach().flatten_all()? * (BN_MOMENTUM * unbiased))?)?;
                    rm.set(&new_mean)?;
                    rv.set(&new_var)?;
                }
                centered.broadcast_div(&(var + BN_EPS)?.sqrt()?)?
            }
        };
        let gamma = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let beta = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normalized.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
    in_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let std = (1.0 / in_features as f64).sqrt();
        Ok(Self {
            weight: store.normal(&format!("{name}.weight"), &[out_features, in_features], std)?,
            bias: store.constant(&format!("{name}.bias"), &[out_features], 0.0)?,
            in_features,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    /// `x` is `(batch, in_features)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, f) = x.dims2()?;
        if f != self.in_features {
            return Err(Error::input(format!(
                "linear layer expects {} features, got {f}",
                self.in_features
            )));
        }
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Row-interpolation matrix for 2x bilinear upsampling with half-pixel
/// centers (`align_corners = false`): `(2n, n)`.
pub fn bilinear_matrix(n: usize) -> Vec<f64> {
    let out = 2 * n;
    let mut m = vec![0.0; out * n];
    for i in 0..out {
        let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let frac = src - i0 as f64;
        m[i * n + i0] += 1.0 - frac;
        m[i * n + i1] += frac;
    }
    m
}

/// Differentiable 2x bilinear upsampling of an NCHW tensor.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let rows = Tensor::from_vec(bilinear_matrix(h), (2 * h, h), &DEVICE)?.to_dtype(x.dtype())?;
    let cols = Tensor::from_vec(bilinear_matrix(w), (2 * w, w), &DEVICE)?
        .to_dtype(x.dtype())?
        .t()?;
    let y = x.broadcast_matmul(&cols)?;
    Ok(rows.broadcast_matmul(&y)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

/// Mean over the spatial dims of an NCHW tensor: `(batch, channels)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Adaptive-moment optimizer over `vars` (no weight decay).
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<candle_nn::AdamW> {
    use candle_nn::Optimizer;
    let params = candle_nn::ParamsAdamW {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    Ok(candle_nn::AdamW::new(vars, params)?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?)
}

pub(crate) fn to_vec1(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(
        x: &[f64],
        (c, h, w): (usize, usize, usize),
        weight: &[f64],
        out_c: usize,
        k: usize,
        s: usize,
    ) -> Vec<f64> {
        let pad = k as isize / 2;
        let ho = (h + 2 * pad as usize - k) / s + 1;
        let wo = (w + 2 * pad as usize - k) / s + 1;
        let mut out = vec![0.0; out_c * ho * wo];
        for o in 0..out_c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s) as isize + ky as isize - pad;
                                let ix = (ox * s) as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = weight[o * c * k * k + ci * k * k + ky * k + kx];
                                acc += wv * x[ci * h * w + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    out[o * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, s, h, w) in &[(3, 1, 5, 6), (3, 2, 6, 6), (3, 2, 5, 7), (1, 2, 4, 4), (7, 2, 9, 9), (3, 2, 1, 1)] {
            let mut store = ParamStore::new(DType::F64, 3);
            let conv = Conv2d::new(&mut store, "c", 2, 3, k, s, false).unwrap();
            let n = 2 * h * w;
            let x: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let xt = Tensor::from_vec(x.clone(), (1, 2, h, w), &DEVICE).unwrap();
            let got = to_vec1(&conv.forward(&xt).unwrap()).unwrap();
            let wv = to_vec1(conv.weight.as_tensor()).unwrap();
            let want = direct_conv(&x, (2, h, w), &wv, 3, k, s);
            assert_eq!(got.len(), want.len(), "k={k} s={s}");
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_batch_items_are_independent() {
        let mut store = ParamStore::new(DType::F64, 4);
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, true).unwrap();
        let a = Tensor::arange(0f64, 32.0, &DEVICE).unwrap().reshape((1, 2, 4, 4)).unwrap().cos().unwrap();
        let b = a.sin().unwrap();
        let batch = Tensor::cat(&[&a, &b, &a], 0).unwrap();
        let out = conv.forward(&batch).unwrap();
        let ya = to_vec1(&conv.forward(&a).unwrap()).unwrap();
        let yb = to_vec1(&conv.forward(&b).unwrap()).unwrap();
        assert_eq!(to_vec1(&out.get(0).unwrap()).unwrap(), ya);
        assert_eq!(to_vec1(&out.get(1).unwrap()).unwrap(), yb);
        assert_eq!(to_vec1(&out.get(2).unwrap()).unwrap(), ya);
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-50.0f64, -1.0, 0.0, 2.0, 50.0], &DEVICE).unwrap();
        let got = to_vec1(&softplus(&x).unwrap()).unwrap();
        for (g, v) in got.iter().zip([-50.0f64, -1.0, 0.0, 2.0, 50.0]) {
            let want = if v > 30.0 { v } else { v.exp().ln_1p() };
            assert!((g - want).abs() < 1e-12, "{v}: {g} vs {want}");
        }
    }

    #[test]
    fn bilinear_matches_candle_forward() {
        let x = Tensor::arange(0f64, 2.0 * 3.0 * 4.0, &DEVICE)
            .unwrap()
            .reshape((1, 2, 3, 4))
            .unwrap()
            .sin()
            .unwrap();
        let ours = upsample_bilinear2x(&x).unwrap();
        let reference = x.upsample_bilinear2d(6, 8, false).unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&diff).unwrap() < 1e-12);
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for n in 1..6 {
            let m = bilinear_matrix(n);
            for row in m.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut store = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], (1, 2, 2, 2), &DEVICE)
            .unwrap();
        let eval = bn.forward(&x, Mode::Eval).unwrap();
        // Fresh running stats are mean 0, var 1.
        let got = to_vec1(&eval).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((got[3] - 4.0 * scale).abs() < 1e-12);
        let train = bn.forward(&x, Mode::Train).unwrap();
        let t = to_vec1(&train).unwrap();
        assert!(t[..4].iter().sum::<f64>().abs() < 1e-12);
        let rm = to_vec1(bn.running.as_ref().unwrap().0.as_tensor()).unwrap();
        assert!((rm[0] - 0.25).abs() < 1e-12 && (rm[1] - 0.65).abs() < 1e-12);
    }

    #[test]
    fn import_rejects_shape_mismatch() {
        let mut store = ParamStore::new(DType::F32, 0);
        store.constant("w", &[2, 2], 1.0).unwrap();
        let err = store
            .import("", |_| Tensor::zeros(3, DType::F32, &DEVICE).ok())
            .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
