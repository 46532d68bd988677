//! Image and feature-map value types.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{self, DEVICE};

/// Height × width × channels image with intensities in `[0, 1]`, stored
/// row-major in HWC order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::input("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::input(format!(
                "image buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::input(format!("image contains non-finite value {v}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// `(1, C, H, W)` tensor of the given dtype.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (h, w, c) = self.shape();
        let t = Tensor::from_slice(&self.data, (h, w, c), &DEVICE)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(dtype)?;
        Ok(t.contiguous()?)
    }

    /// Inverse of [`Image::to_tensor`]; accepts `(1, C, H, W)` or `(C, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::input(format!("expected an image tensor, got rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let hwc = t.permute((1, 2, 0))?;
        Self::new(h, w, c, nn::to_vec1(&hwc)?)
    }

    pub fn stack_tensors(images: &[Image], dtype: DType) -> Result<Tensor> {
        let ts = images
            .iter()
            .map(|im| im.to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    /// Area-averaging resize; upsampling falls back to nearest neighbour.
    pub fn resize_area(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::input("target size must be positive"));
        }
        let c = self.channels;
        let mut data = vec![0.0; height * width * c];
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for oy in 0..height {
            let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
            for ox in 0..width {
                let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
                let mut acc = vec![0.0; c];
                let mut total = 0.0;
                let mut iy = y0.floor() as usize;
                while (iy as f64) < y1 && iy < self.height {
                    let wy = (y1.min(iy as f64 + 1.0) - y0.max(iy as f64)).max(0.0);
                    let mut ix = x0.floor() as usize;
                    while (ix as f64) < x1 && ix < self.width {
                        let wx = (x1.min(ix as f64 + 1.0) - x0.max(ix as f64)).max(0.0);
                        let wgt = wy * wx;
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += wgt * self.get(iy, ix, ch);
                        }
                        total += wgt;
                        ix += 1;
                    }
                    iy += 1;
                }
                for (ch, a) in acc.into_iter().enumerate() {
                    data[(oy * width + ox) * c + ch] = if total > 0.0 { a / total } else { 0.0 };
                }
            }
        }
        Self::new(height, width, c, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb32f();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(f64::from).collect();
        Self::new(h as usize, w as usize, 3, data)
    }

    /// Writes an 8-bit PNG (grayscale for one channel, RGB for three).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer length checked at construction")
                .save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer length checked at construction")
                .save(path)?,
            c => return Err(Error::input(format!("cannot encode {c}-channel image as PNG"))),
        }
        Ok(())
    }
}

/// One rank-3 `(channels, height, width)` activation map.
#[derive(Debug, Clone)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims3()?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dims3().expect("rank checked at construction")
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        nn::to_vec1(&self.0)
    }
}
