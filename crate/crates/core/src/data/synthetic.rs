//! Lesion-like synthetic images with known class-relevant regions.
//!
//! Class 0 is a small dark lesion, class 1 a large dark lesion and class 2 a
//! large light lesion, so radius and colour are the only features that
//! separate the classes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledDataset, Mask};
use crate::error::{Error, Result};
use crate::raster::Image;

pub const SYNTHETIC_SIZE: usize = 32;
pub const SYNTHETIC_CLASSES: [&str; 3] = ["small_dark", "large_dark", "large_light"];

struct Wave {
    amp: f64,
    ky: f64,
    kx: f64,
    phase: f64,
}

fn lesion(rng: &mut ChaCha8Rng, class: usize) -> (Image, Mask) {
    let size = SYNTHETIC_SIZE;
    let skin = [
        rng.random_range(0.80..0.90),
        rng.random_range(0.60..0.70),
        rng.random_range(0.50..0.60),
    ];
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.15..0.45);
            let dir = rng.random_range(0.0..PI);
            Wave {
                amp: rng.random_range(0.015..0.035),
                ky: freq * dir.sin(),
                kx: freq * dir.cos(),
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();

    let radius = match class {
        0 => rng.random_range(3.5..5.0),
        _ => rng.random_range(8.0..10.5),
    };
    let aspect = rng.random_range(0.75..1.0);
    let angle = rng.random_range(0.0..PI);
    let (cy, cx) = (rng.random_range(11.0..21.0), rng.random_range(11.0..21.0));
    let tone = match class {
        2 => [
            rng.random_range(0.62..0.70),
            rng.random_range(0.42..0.50),
            rng.random_range(0.36..0.44),
        ],
        _ => [
            rng.random_range(0.30..0.40),
            rng.random_range(0.17..0.25),
            rng.random_range(0.12..0.18),
        ],
    };
    let grain = Normal::new(0.0, 0.015).expect("positive std");

    let (a, b) = (radius, radius * aspect);
    let (sin, cos) = angle.sin_cos();
    let mut data = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64, x as f64);
            let (dy, dx) = (fy - cy, fx - cx);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            // ~1 pixel soft edge
            let alpha = ((1.0 - r) * b + 0.5).clamp(0.0, 1.0);
            mask.push(r <= 1.0);
            let texture: f64 = waves
                .iter()
                .map(|w| w.amp * (w.ky * fy + w.kx * fx + w.phase).sin())
                .sum();
            for c in 0..3 {
                let bg = skin[c] + texture;
                let fg = tone[c] * (1.0 + 0.5 * texture);
                let px = (1.0 - alpha) * bg + alpha * fg + grain.sample(rng);
                data.push(px.clamp(0.0, 1.0));
            }
        }
    }
    (
        Image::new(size, size, 3, data).expect("sizes are consistent"),
        Mask::new(size, size, mask).expect("sizes are consistent"),
    )
}

/// `n` images of 32x32x3 cycling through the three classes, with masks of
/// the lesion pixels.
pub fn make_synthetic_lesions(n: usize, seed: u64) -> Result<LabeledDataset> {
    let k = SYNTHETIC_CLASSES.len();
    if n < 2 * k {
        return Err(Error::input(format!(
            "synthetic dataset needs at least {} images, got {n}",
            2 * k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let (im, m) = lesion(&mut rng, class);
        items.push((im, class));
        masks.push(m);
    }
    LabeledDataset::new(
        items,
        SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(),
        Some(masks),
    )
}
