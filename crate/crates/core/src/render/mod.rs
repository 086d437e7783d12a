//! Differentiable tile-based Gaussian splatting.
//!
//! The forward pass projects every Gaussian, sorts by camera depth (ties broken
//! by index), bins footprints into screen tiles and alpha-composites front to
//! back. Every output map shares one set of blend weights
//! `w_i = a_i Π_{j<i} (1 - a_j)` with `a_i = alpha_i G_i(p)`:
//!
//! * `rgb = Σ w_i c_i + T bg`
//! * `alpha = Σ w_i`
//! * `depth = Σ w_i z_i / alpha` (0 where nothing contributes)
//! * `feature = Σ w_i f_i`
//!
//! The per-pixel contributor lists are kept in [`BlendRecords`] so that
//! [`render_backward`] can produce exact gradients without re-sorting.

mod backward;
mod project;
mod raster;

pub use backward::{render_backward, RenderCotangent, RenderGradients};
pub use project::{project_gaussian, ProjectedGaussian, COV_DILATION, TRUNCATION_SIGMA};
pub use raster::render;

pub const DEFAULT_TILE_SIZE: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    pub render_features: bool,
    pub tile_size: u32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            render_features: false,
            tile_size: DEFAULT_TILE_SIZE,
        }
    }
}

impl RenderOptions {
    pub fn with_features(mut self) -> Self {
        self.render_features = true;
        self
    }

    pub fn with_background(mut self, background: [f64; 3]) -> Self {
        self.background = background;
        self
    }
}

/// One Gaussian's contribution to one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendRecord {
    pub id: u32,
    /// `a_i = alpha_i G_i(p)`
    pub opacity: f64,
    /// `w_i = a_i T_i`
    pub weight: f64,
}

/// Per-pixel ordered contributor lists in compressed-row form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlendRecords {
    offsets: Vec<usize>,
    entries: Vec<BlendRecord>,
}

impl BlendRecords {
    pub(crate) fn from_parts(offsets: Vec<usize>, entries: Vec<BlendRecord>) -> Self {
        Self { offsets, entries }
    }

    pub fn num_pixels(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn pixel(&self, index: usize) -> &[BlendRecord] {
        &self.entries[self.offsets[index]..self.offsets[index + 1]]
    }

    pub fn total_entries(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    /// Row-major, 3 channels per pixel.
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Row-major, `feature_dim` channels per pixel, present iff requested.
    pub feature: Option<Vec<f64>>,
    pub feature_dim: usize,
    pub records: BlendRecords,
    pub background: [f64; 3],
    pub(crate) num_gaussians: usize,
}

impl RenderOutput {
    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn feature_at(&self, pixel: usize) -> Option<&[f64]> {
        self.feature
            .as_ref()
            .map(|f| &f[pixel * self.feature_dim..(pixel + 1) * self.feature_dim])
    }
}
