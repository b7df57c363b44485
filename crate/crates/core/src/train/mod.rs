//! Heatmap-regression training: target encoding, augmentation, Adam with a
//! milestone schedule, the synthetic face generator and the training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

mod augment;
mod data;
mod optim;
mod synth;
mod trainer;

pub use augment::{augment, AffineDraw, AugmentConfig};
pub use data::{Dataset, Image, Layout, Sample};
pub use optim::{Adam, AdamConfig, MultiStepLr};
pub use synth::{synth_dataset, synth_split, SYNTH_SIZE};
pub use trainer::{train, EpochLog, TrainOutcome};

/// Landmark coordinates in input-image pixels (pixel `i` centred at `i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let visible = vec![true; points.len()];
        LandmarkSet { points, visible }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p[0].is_finite() && p[1].is_finite())
    }

    /// Applies `f` to every point, keeping visibility.
    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        LandmarkSet {
            points: self.points.iter().map(|&p| f(p)).collect(),
            visible: self.visible.clone(),
        }
    }
}

/// Heatmaps (N, L, h, w) with the input-pixel stride of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapBatch<T: Scalar> {
    pub heatmaps: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> HeatmapBatch<T> {
    pub fn new(heatmaps: Tensor<T>, stride: usize) -> Self {
        HeatmapBatch { heatmaps, stride }
    }
}

/// Gaussian targets peaking at 1.0 on the quantized landmark cell, plus a
/// per-map mask that is 0 for invisible or out-of-grid landmarks.
pub fn encode_targets<T: Scalar>(
    sets: &[LandmarkSet],
    size: (usize, usize),
    stride: usize,
    sigma: f64,
) -> Result<(HeatmapBatch<T>, Vec<T>)> {
    let (h, w) = size;
    let l = sets.first().map_or(0, |s| s.len());
    if let Some(bad) = sets.iter().position(|s| s.len() != l) {
        return Err(Error::config(format!(
            "landmark set {bad} has {} points, expected {l}",
            sets[bad].len()
        )));
    }
    if sigma <= 0.0 || stride == 0 {
        return Err(Error::config("gaussian sigma and stride must be positive"));
    }
    let mut t = Tensor::zeros([sets.len(), l, h, w]);
    let mut mask = vec![T::zero(); sets.len() * l];
    let denom = 2.0 * sigma * sigma;
    let hw = h * w;
    let data = t.data_mut();
    for (n, set) in sets.iter().enumerate() {
        for (k, (&[x, y], &vis)) in set.points.iter().zip(&set.visible).enumerate() {
            let cx = (x / stride as f64).round();
            let cy = (y / stride as f64).round();
            let inside = cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64;
            if !vis || !x.is_finite() || !y.is_finite() || !inside {
                continue;
            }
            mask[n * l + k] = T::one();
            let map = &mut data[(n * l + k) * hw..][..hw];
            for i in 0..h {
                let dy = i as f64 - cy;
                for j in 0..w {
                    let dx = j as f64 - cx;
                    map[i * w + j] = T::of((-(dx * dx + dy * dy) / denom).exp());
                }
            }
        }
    }
    Ok((HeatmapBatch::new(t, stride), mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Bce,
}

/// Training hyper-parameters; defaults are the full-scale recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub loss: LossKind,
    pub flip_prob: f64,
    pub scale_range: f64,
    pub rotation_deg: f64,
    pub gaussian_sigma: f64,
    pub seed: u64,
    /// Batches prepared ahead of the optimizer.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 210,
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            milestones: vec![170, 200],
            lr_decay: 0.1,
            loss: LossKind::Mse,
            flip_prob: 0.5,
            scale_range: 0.25,
            rotation_deg: 90.0,
            gaussian_sigma: 2.0,
            seed: 0,
            prefetch: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(format!("train.{field}: {msg}")));
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", format!("{} is not a positive learning rate", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(name, format!("{b} is outside [0, 1)"));
            }
        }
        if self.eps <= 0.0 {
            return fail("eps", "must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("milestones", format!("{:?} are not strictly increasing", self.milestones));
        }
        if let Some(&m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
            return fail("milestones", format!("{m} is not below epochs {}", self.epochs));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay", format!("{} is outside (0, 1]", self.lr_decay));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail("flip_prob", format!("{} is outside [0, 1]", self.flip_prob));
        }
        if !(0.0..1.0).contains(&self.scale_range) {
            return fail("scale_range", format!("{} is outside [0, 1)", self.scale_range));
        }
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            return fail("rotation_deg", format!("{} is outside [0, 180]", self.rotation_deg));
        }
        if self.gaussian_sigma <= 0.0 {
            return fail("gaussian_sigma", "must be positive".into());
        }
        if self.prefetch == 0 {
            return fail("prefetch", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            flip_prob: self.flip_prob,
            scale_range: self.scale_range,
            rotation_deg: self.rotation_deg,
        }
    }

    pub fn schedule(&self) -> MultiStepLr {
        MultiStepLr::new(self.lr, self.milestones.clone(), self.lr_decay)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}
