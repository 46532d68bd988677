use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorruptionKind {
    /// Square patch at a seeded-random position replaced by `fill_value`.
    Occlusion { patch_size: usize, fill_value: f64 },
    /// Gaussian blur with half-width `ceil(3 sigma)` and reflective borders.
    Blur { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn occlusion(patch_size: usize, fill_value: f64, seed: u64) -> Self {
        Self {
            kind: CorruptionKind::Occlusion {
                patch_size,
                fill_value,
            },
            seed,
        }
    }

    pub fn blur(sigma: f64) -> Self {
        Self {
            kind: CorruptionKind::Blur { sigma },
            seed: 0,
        }
    }

    /// Parses `occlusion:<patch>[:<fill>]` or `blur:<sigma>`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::input(format!("bad number `{v}` in corruption `{s}`")))
        };
        match parts.as_slice() {
            ["occlusion", p] | ["occlusion", p, _] => {
                let patch_size = p
                    .parse::<usize>()
                    .map_err(|_| Error::input(format!("bad patch size in `{s}`")))?;
                let fill_value = match parts.get(2) {
                    Some(f) => num(f)?,
                    None => 0.5,
                };
                Ok(Self::occlusion(patch_size, fill_value, seed))
            }
            ["blur", sigma] => Ok(Self::blur(num(sigma)?)),
            _ => Err(Error::input(format!(
                "corruption `{s}` is not occlusion:<patch>[:<fill>] or blur:<sigma>"
            ))),
        }
    }

    /// Inverse of [`CorruptionSpec::parse`].
    pub fn describe(&self) -> String {
        match self.kind {
            CorruptionKind::Occlusion {
                patch_size,
                fill_value,
            } => format!("occlusion:{patch_size}:{fill_value}"),
            CorruptionKind::Blur { sigma } => format!("blur:{sigma}"),
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn blur(image: &Image, sigma: f64) -> Result<Image> {
    let kernel = gaussian_kernel(sigma);
    let half = (kernel.len() / 2) as isize;
    let (h, w, c) = image.shape();
    let mut tmp = image.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * image.get(y, reflect(x as isize + k as isize - half, w), ch))
                    .sum();
                tmp.set(y, x, ch, v);
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp.get(reflect(y as isize + k as isize - half, h), x, ch))
                    .sum();
                out.set(y, x, ch, v);
            }
        }
    }
    Ok(out.clamped())
}

/// Applies an out-of-distribution corruption; a pure function of its inputs.
pub fn corrupt(image: &Image, spec: &CorruptionSpec) -> Result<Image> {
    match spec.kind {
        CorruptionKind::Occlusion {
            patch_size,
            fill_value,
        } => {
            let (h, w, c) = image.shape();
            if patch_size > h.min(w) {
                return Err(Error::input(format!(
                    "occlusion patch {patch_size} larger than {h}x{w} image"
                )));
            }
            if !(0.0..=1.0).contains(&fill_value) {
                return Err(Error::input(format!("fill value {fill_value} outside [0, 1]")));
            }
            if patch_size == 0 {
                return Ok(image.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let top = rng.random_range(0..=h - patch_size);
            let left = rng.random_range(0..=w - patch_size);
            let mut out = image.clone();
            for y in top..top + patch_size {
                for x in left..left + patch_size {
                    for ch in 0..c {
                        out.set(y, x, ch, fill_value);
                    }
                }
            }
            Ok(out)
        }
        CorruptionKind::Blur { sigma } => {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::input(format!("blur sigma {sigma} must be finite and >= 0")));
            }
            if sigma == 0.0 {
                return Ok(image.clone());
            }
            blur(image, sigma)
        }
    }
}
