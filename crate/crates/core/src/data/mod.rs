//! Datasets, out-of-distribution corruptions, and evaluation metrics.

mod corrupt;
mod folder;
mod metrics;
mod synthetic;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec};
pub use folder::{export_image_folder, load_image_folder};
pub use metrics::{difference_map, localization_ratio, mse, psnr, DifferenceMap, PSNR_CAP_DB};
pub use synthetic::{make_synthetic_lesions, SYNTHETIC_CLASSES, SYNTHETIC_SIZE};

use crate::error::{Error, Result};
use crate::raster::Image;

pub const DEFAULT_SPLIT_FRACTION: f64 = 0.9;

/// Binary relevance mask aligned with an image's spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::input("mask buffer does not match its dimensions"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Single-channel PNG with values {0, 255}.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length checked at construction")
            .save(path)?;
        Ok(())
    }

    /// Any pixel above mid-gray counts as inside.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Self::new(
            h as usize,
            w as usize,
            img.into_raw().into_iter().map(|v| v >= 128).collect(),
        )
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        let data = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                self.get(y * self.height / height, x * self.width / width)
            })
            .collect();
        Self::new(height, width, data)
    }
}

/// Labelled images with 0-based class indices into `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub items: Vec<(Image, usize)>,
    pub class_names: Vec<String>,
    pub masks: Option<Vec<Mask>>,
}

impl LabeledDataset {
    pub fn new(
        items: Vec<(Image, usize)>,
        class_names: Vec<String>,
        masks: Option<Vec<Mask>>,
    ) -> Result<Self> {
        let k = class_names.len();
        if let Some((_, bad)) = items.iter().find(|(_, l)| *l >= k) {
            return Err(Error::input(format!("label {bad} out of range for {k} classes")));
        }
        if let Some(masks) = &masks {
            if masks.len() != items.len() {
                return Err(Error::input("mask count differs from item count"));
            }
            for ((im, _), m) in items.iter().zip(masks) {
                if (m.height(), m.width()) != (im.height(), im.width()) {
                    return Err(Error::input("mask dims differ from image dims"));
                }
            }
        }
        Ok(Self {
            items,
            class_names,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, l)| *l).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for (_, l) in &self.items {
            counts[*l] += 1;
        }
        counts
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Sub-dataset of the given item indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
            masks: self
                .masks
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i].clone()).collect()),
        }
    }
}

/// Index sets of a per-class shuffled split; both sorted ascending.
pub fn stratified_indices(
    dataset: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::input(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, l)) in dataset.items.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::input(format!(
                "class `{}` has {} sample(s); stratified split needs at least 2",
                dataset.class_names[class],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_train = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        holdout.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    Ok((train, holdout))
}

/// Per-class split into `(train, holdout)` keeping class proportions.
pub fn stratified_split(
    dataset: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, holdout) = stratified_indices(dataset, fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&holdout)))
}
