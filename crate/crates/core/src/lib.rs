//! 4D Gaussian splatting with Taylor-series motion.
//!
//! A scene is a set of [`GaussianPrimitive`]s whose centers move along a
//! truncated Taylor series in time. The crate provides the differentiable
//! renderer and its analytic backward pass, the training losses, a semantic
//! feature pathway, per-scene fitting, causal streaming composition,
//! evaluation metrics and the on-disk formats used by the command-line tool.

pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod optimizer;
pub mod render;
pub mod scene;
pub mod semantics;
pub mod streaming;

pub use error::{Error, Result};
pub use motion::MotionCoefficients;
pub use render::{render, render_backward, RenderOptions, RenderOutput};
pub use scene::{CameraModel, GaussianPrimitive};
