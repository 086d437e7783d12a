//! Machine-readable output.
//!
//! Every command prints one JSON object on a single stdout line. The object
//! has a `"command"` field naming the subcommand and the fields listed on the
//! matching [`Report`] variant. With `--timing` an extra `"wall_clock_s"`
//! number is added; without it no field depends on the clock.
//!
//! `stream` also writes `records.jsonl` with one [`StreamRecord`] per frame.

use serde::{Deserialize, Serialize};
use splat4d::metrics::{FlowEvalResult, SegEvalResult};
use splat4d::streaming::MemoryStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Report {
    Render {
        width: u32,
        height: u32,
        gaussians: usize,
        time: f64,
    },
    FitMotion {
        status: Status,
        frames: usize,
        gaussians: usize,
        iterations: usize,
        best_iteration: usize,
        best_loss: f64,
        /// Iteration at which the loss stopped being finite.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diverged_at: Option<usize>,
    },
    FitSemantics {
        status: Status,
        frames: usize,
        gaussians: usize,
        iterations: usize,
        best_iteration: usize,
        best_loss: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diverged_at: Option<usize>,
    },
    Stream {
        frames: usize,
        peak_gaussians: usize,
        peak_tokens: usize,
        /// Interval covered by the last composed scene.
        last_interval: [i64; 2],
    },
    EvalFlow(FlowEvalResult),
    EvalSeg(SegEvalResult),
    EvalPhoto {
        psnr: f64,
        ssim: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        depth_rmse: Option<f64>,
    },
    Query {
        prompt: String,
        threshold: f64,
        pixels: usize,
        selected: usize,
        /// Pixel count per bank label when a class map was requested.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        class_counts: Option<Vec<u64>>,
    },
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamRecord {
    pub timestamp: i64,
    pub interval: [i64; 2],
    pub num_static: usize,
    pub num_dynamic: usize,
    /// Gaussians in the composed scene.
    pub composed: usize,
    pub memory: MemoryStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attended_tokens: Option<usize>,
    /// Ingest time only; present with `--timing`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_s: Option<f64>,
}

pub fn to_line(report: &Report, wall_clock_s: Option<f64>) -> String {
    let mut v = serde_json::to_value(report).expect("reports serialize");
    if let (Some(t), Some(obj)) = (wall_clock_s, v.as_object_mut()) {
        obj.insert("wall_clock_s".into(), t.into());
    }
    v.to_string()
}
