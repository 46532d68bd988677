use super::Mask;
use crate::error::{Error, Result};
use crate::raster::Image;

pub const PSNR_CAP_DB: f64 = 100.0;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio for peak value 1, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let err = mse(a, b)?;
    if err < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / err).log10()).min(PSNR_CAP_DB))
}

/// Channel-summed absolute difference between two images.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DifferenceMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::input("difference map buffer does not match its dimensions"));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::input("difference map values must be finite and >= 0"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn total_mass(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Grayscale image scaled by the map's maximum, for display only.
    pub fn to_display_image(&self) -> Image {
        let peak = self.data.iter().cloned().fold(0.0, f64::max);
        let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        Image::new(
            self.height,
            self.width,
            1,
            self.data.iter().map(|v| v * scale).collect(),
        )
        .expect("dimensions checked at construction")
    }
}

pub fn difference_map(a: &Image, b: &Image) -> Result<DifferenceMap> {
    same_shape(a, b)?;
    let c = a.channels();
    let data = a
        .data()
        .chunks(c)
        .zip(b.data().chunks(c))
        .map(|(pa, pb)| pa.iter().zip(pb).map(|(x, y)| (x - y).abs()).sum())
        .collect();
    DifferenceMap::new(a.height(), a.width(), data)
}

/// Fraction of difference mass that falls inside `mask`.
pub fn localization_ratio(diff: &DifferenceMap, mask: &Mask) -> Result<f64> {
    if (mask.height(), mask.width()) != diff.dims() {
        return Err(Error::input("mask and difference map differ in size"));
    }
    let total = diff.total_mass();
    if total <= 0.0 {
        return Err(Error::UndefinedRatio);
    }
    let inside: f64 = diff
        .data
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    Ok(inside / total)
}
