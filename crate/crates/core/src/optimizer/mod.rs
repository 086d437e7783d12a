//! Per-scene fitting by gradient descent on rendered losses.
//!
//! [`fit_motion`] learns Taylor motion coefficients (and optionally geometry
//! and appearance) from photometric, depth and sky supervision at other
//! timestamps, with no flow labels. [`fit_semantics`] distills per-Gaussian
//! features and the decoder, first against teacher feature maps and then
//! against class labels.

mod adam;
mod motion_fit;
mod semantic_fit;

use std::time::Duration;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use motion_fit::fit_motion;
pub use semantic_fit::fit_semantics;

use crate::error::{Error, Result};
use crate::losses::{GradientProxy, LossComponents, LossWeights, PerceptualFn, ZeroPerceptual};
use crate::scene::{CameraModel, GaussianPrimitive, MOTION_ORDERS};
use crate::semantics::FeatureDecoder;

/// One supervised view. Image-shaped fields are row-major over the camera's pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub timestamp: f64,
    pub camera: CameraModel,
    /// 3 channels in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// Metric depth; pixels that are not finite or not positive are ignored.
    pub depth: Option<Vec<f64>>,
    pub sky_mask: Option<Vec<bool>>,
    /// Teacher features, `teacher_dim` channels per pixel.
    pub teacher_features: Option<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl FrameObservation {
    pub fn new(timestamp: f64, camera: CameraModel, rgb: Vec<f64>) -> Result<Self> {
        let f = Self {
            timestamp,
            camera,
            rgb,
            depth: None,
            sky_mask: None,
            teacher_features: None,
            labels: None,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.camera.num_pixels();
        if !self.timestamp.is_finite() {
            return Err(Error::invalid("timestamp", "must be finite"));
        }
        if self.rgb.len() != n * 3 {
            return Err(Error::shape("frame rgb", n * 3, self.rgb.len()));
        }
        if let Some(d) = &self.depth {
            if d.len() != n {
                return Err(Error::shape("frame depth", n, d.len()));
            }
        }
        if let Some(m) = &self.sky_mask {
            if m.len() != n {
                return Err(Error::shape("frame sky mask", n, m.len()));
            }
        }
        if let Some(f) = &self.teacher_features {
            if f.is_empty() || f.len() % n != 0 {
                return Err(Error::shape("frame teacher features", format!("a multiple of {n}"), f.len()));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::shape("frame labels", n, l.len()));
            }
        }
        Ok(())
    }

    pub(crate) fn depth_mask(&self) -> Option<Vec<bool>> {
        self.depth
            .as_ref()
            .map(|d| d.iter().map(|v| v.is_finite() && *v > 0.0).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub motion: f64,
    pub geometry: f64,
    pub appearance: f64,
    pub feature: f64,
    pub decoder: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            motion: 1e-2,
            geometry: 1e-3,
            appearance: 1e-3,
            feature: 1e-3,
            decoder: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualKind {
    #[default]
    None,
    GradientProxy,
}

impl PerceptualKind {
    pub(crate) fn build(self) -> Box<dyn PerceptualFn> {
        match self {
            PerceptualKind::None => Box::new(ZeroPerceptual),
            PerceptualKind::GradientProxy => Box::new(GradientProxy::default()),
        }
    }
}

/// Iterations spent on each semantic objective, run in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSchedule {
    pub sem_iterations: usize,
    pub cls_iterations: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self { sem_iterations: 200, cls_iterations: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Motion fitting iterations.
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub adam: AdamConfig,
    /// Frames rendered per iteration; all frames when unset.
    pub samples_per_iter: Option<usize>,
    pub weights: LossWeights,
    pub stages: StageSchedule,
    pub seed: u64,
    /// Also fit `mu`, `q`, `s`, `alpha` and `c`.
    pub train_geometry: bool,
    pub motion_orders: usize,
    /// Restart motion from zero speed with random unit directions.
    pub reinit_motion: bool,
    pub freeze_decoder: bool,
    pub background: [f64; 3],
    pub perceptual: PerceptualKind,
    /// Fraction of motion iterations over which the supervision horizon grows
    /// from the nearest frame offset to the full window.
    pub horizon_warmup: f64,
    /// Learning rates decay exponentially to this fraction of their base value
    /// by the last iteration of each run or stage.
    pub lr_final_ratio: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            learning_rates: LearningRates::default(),
            adam: AdamConfig::default(),
            samples_per_iter: None,
            weights: LossWeights::default(),
            stages: StageSchedule::default(),
            seed: 0,
            train_geometry: false,
            motion_orders: MOTION_ORDERS,
            reinit_motion: true,
            freeze_decoder: false,
            background: [0.0; 3],
            perceptual: PerceptualKind::None,
            horizon_warmup: 0.3,
            lr_final_ratio: 0.1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be at least 1"));
        }
        if self.motion_orders == 0 {
            return Err(Error::invalid("motion_orders", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.horizon_warmup) {
            return Err(Error::invalid("horizon_warmup", format!("{} must lie in [0, 1]", self.horizon_warmup)));
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return Err(Error::invalid("lr_final_ratio", format!("{} must lie in (0, 1]", self.lr_final_ratio)));
        }
        if self.samples_per_iter == Some(0) {
            return Err(Error::invalid("samples_per_iter", "must be at least 1"));
        }
        let lr = &self.learning_rates;
        for (name, v) in [
            ("learning_rates.motion", lr.motion),
            ("learning_rates.geometry", lr.geometry),
            ("learning_rates.appearance", lr.appearance),
            ("learning_rates.feature", lr.feature),
            ("learning_rates.decoder", lr.decoder),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("{v} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return Err(Error::invalid("adam", "betas must lie in [0, 1) and eps must be positive"));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Motion,
    Sem,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub total: f64,
    pub components: LossComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub seed: u64,
    pub iterations: usize,
    pub trace: Vec<LossRecord>,
    pub best_iteration: usize,
    pub best_loss: f64,
    #[serde(skip)]
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutput {
    pub gaussians: Vec<GaussianPrimitive>,
    pub decoder: Option<FeatureDecoder>,
    pub report: FitReport,
}

/// Multiplier on the base learning rates at iteration `it` of `total`.
pub(crate) fn lr_decay(final_ratio: f64, it: usize, total: usize) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    final_ratio.powf(it as f64 / (total - 1) as f64)
}

/// Indices of the frames to render this iteration.
pub(crate) fn sample_frames<R: Rng>(rng: &mut R, available: &[usize], per_iter: Option<usize>) -> Vec<usize> {
    match per_iter {
        Some(k) if k < available.len() => {
            let mut picked: Vec<usize> = index::sample(rng, available.len(), k).into_iter().map(|i| available[i]).collect();
            picked.sort_unstable();
            picked
        }
        _ => available.to_vec(),
    }
}

/// Tracks the best state seen and the previous finite one.
pub(crate) struct BestTracker<S: Clone> {
    pub best: Option<(usize, f64, S)>,
    pub last_finite: Option<S>,
}

impl<S: Clone> BestTracker<S> {
    pub fn new() -> Self {
        Self { best: None, last_finite: None }
    }

    pub fn observe(&mut self, iteration: usize, loss: f64, state: &S) {
        if self.best.as_ref().is_none_or(|(_, b, _)| loss < *b) {
            self.best = Some((iteration, loss, state.clone()));
        }
        self.last_finite = Some(state.clone());
    }
}
