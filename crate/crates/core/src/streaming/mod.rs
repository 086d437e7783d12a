//! Causal scene composition over a stream of per-frame Gaussian sets.
//!
//! Online mode keeps two static snapshots and the newest dynamic set, so the
//! scene for `[t - stride, t]` is built from observed frames only and memory
//! does not grow with stream length. Dynamic Gaussians are moved back in time
//! with their own forward motion evaluated at negative offsets. Offline mode
//! warps every snapshot to the query time and takes the union.

mod attention;

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use attention::{attend, blocks_from_dense, windowed_causal_attention, TokenBlock};

use crate::error::{Error, Result};
use crate::motion::{partition_static_dynamic, warp_gaussians, DEFAULT_MOTION_THRESHOLD};
use crate::scene::GaussianPrimitive;

pub const DEFAULT_STRIDE: i64 = 5;
/// Attention window in ingested frames.
pub const DEFAULT_WINDOW: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    /// Frames between consecutive ingested timestamps.
    pub stride: i64,
    pub tau_m: f64,
    pub window: usize,
    pub heads: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { stride: DEFAULT_STRIDE, tau_m: DEFAULT_MOTION_THRESHOLD, window: DEFAULT_WINDOW, heads: 1 }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(Error::invalid("stride", format!("{} must be at least 1", self.stride)));
        }
        if !(self.tau_m > 0.0) || !self.tau_m.is_finite() {
            return Err(Error::invalid("tau_m", format!("{} must be positive", self.tau_m)));
        }
        if self.window == 0 {
            return Err(Error::invalid("window", "must be at least 1"));
        }
        if self.heads == 0 {
            return Err(Error::invalid("heads", "must be at least 1"));
        }
        Ok(())
    }
}

/// Which part of a composed scene a Gaussian came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PreviousStatic,
    CurrentStatic,
    Dynamic,
}

/// The scene over `[start, end]`, renderable at any time in that interval.
#[derive(Debug, Clone)]
pub struct ComposedScene {
    start: i64,
    end: i64,
    previous_static: Arc<Vec<GaussianPrimitive>>,
    current_static: Arc<Vec<GaussianPrimitive>>,
    dynamic: Arc<Vec<GaussianPrimitive>>,
}

impl ComposedScene {
    pub fn interval(&self) -> (i64, i64) {
        (self.start, self.end)
    }

    pub fn group(&self, p: Provenance) -> &[GaussianPrimitive] {
        match p {
            Provenance::PreviousStatic => &self.previous_static,
            Provenance::CurrentStatic => &self.current_static,
            Provenance::Dynamic => &self.dynamic,
        }
    }

    pub fn len(&self) -> usize {
        self.previous_static.len() + self.current_static.len() + self.dynamic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gaussians at time `tau`: both static groups unchanged, then the dynamic
    /// group warped by `Γ(tau - end)`.
    pub fn at(&self, tau: f64) -> Result<Vec<GaussianPrimitive>> {
        Ok(self.tagged_at(tau)?.into_iter().map(|(_, g)| g).collect())
    }

    pub fn tagged_at(&self, tau: f64) -> Result<Vec<(Provenance, GaussianPrimitive)>> {
        if !(tau >= self.start as f64 && tau <= self.end as f64) {
            return Err(Error::invalid(
                "query time",
                format!("{tau} is outside the composed interval [{}, {}]", self.start, self.end),
            ));
        }
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.previous_static.iter().map(|g| (Provenance::PreviousStatic, g.clone())));
        out.extend(self.current_static.iter().map(|g| (Provenance::CurrentStatic, g.clone())));
        let warped = warp_gaussians(&self.dynamic, tau - self.end as f64);
        out.extend(warped.into_iter().map(|g| (Provenance::Dynamic, g)));
        Ok(out)
    }
}

/// One ingested frame: its Gaussians and, optionally, its attention tokens.
#[derive(Debug, Clone)]
pub struct StreamFrame {
    pub timestamp: i64,
    pub gaussians: Vec<GaussianPrimitive>,
    pub tokens: Option<TokenBlock>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub frames_ingested: u64,
    pub retained_gaussians: usize,
    pub retained_tokens: usize,
    pub peak_gaussians: usize,
    pub peak_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct IngestOutput {
    pub scene: ComposedScene,
    /// The new frame's tokens after windowed attention, when tokens were given.
    pub attended: Option<TokenBlock>,
    pub num_static: usize,
    pub num_dynamic: usize,
}

/// Online composition state. Holds at most two static sets, one dynamic set
/// and `window` token blocks.
#[derive(Debug, Clone)]
pub struct StreamState {
    cfg: StreamConfig,
    current: Option<ComposedScene>,
    tokens: VecDeque<TokenBlock>,
    stats: MemoryStats,
}

impl StreamState {
    pub fn new(cfg: StreamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            current: None,
            tokens: VecDeque::with_capacity(cfg.window + 1),
            stats: MemoryStats::default(),
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    pub fn timestamp(&self) -> Option<i64> {
        self.current.as_ref().map(|s| s.end)
    }

    /// The scene composed at the last ingest.
    pub fn scene(&self) -> Option<&ComposedScene> {
        self.current.as_ref()
    }

    pub fn memory(&self) -> MemoryStats {
        self.stats
    }

    pub fn ingest_frame(&mut self, frame: StreamFrame) -> Result<IngestOutput> {
        if let Some(prev) = self.timestamp() {
            if frame.timestamp <= prev {
                return Err(Error::invalid(
                    "timestamp",
                    format!("{} does not come after the previous frame {prev}", frame.timestamp),
                ));
            }
            if frame.timestamp != prev + self.cfg.stride {
                return Err(Error::invalid(
                    "timestamp",
                    format!("{} is not {prev} + stride {}", frame.timestamp, self.cfg.stride),
                ));
            }
        }
        for g in &frame.gaussians {
            g.validate()?;
        }
        if let Some(tok) = &frame.tokens {
            attention::check_heads(tok.dim(), self.cfg.heads)?;
            if tok.rows() == 0 {
                return Err(Error::invalid("frame tokens", "at least one token is required"));
            }
            if let Some(last) = self.tokens.back() {
                if tok.dim() != last.dim() {
                    return Err(Error::shape("frame token dim", last.dim(), tok.dim()));
                }
            }
        }

        let (si, di) = partition_static_dynamic(&frame.gaussians, -(self.cfg.stride as f64), self.cfg.tau_m)?;
        let stat: Arc<Vec<_>> = Arc::new(si.iter().map(|&i| frame.gaussians[i].clone()).collect());
        let dynamic: Arc<Vec<_>> = Arc::new(di.iter().map(|&i| frame.gaussians[i].clone()).collect());

        let attended = match frame.tokens {
            Some(tok) => {
                self.tokens.push_back(tok);
                while self.tokens.len() > self.cfg.window {
                    self.tokens.pop_front();
                }
                let context: Vec<&TokenBlock> = self.tokens.iter().collect();
                Some(attend(self.tokens.back().unwrap(), &context, self.cfg.heads)?)
            }
            None => {
                self.tokens.clear();
                None
            }
        };

        let previous = self.current.take();
        let scene = ComposedScene {
            start: if previous.is_some() { frame.timestamp - self.cfg.stride } else { frame.timestamp },
            end: frame.timestamp,
            previous_static: previous.map(|s| s.current_static).unwrap_or_default(),
            current_static: stat,
            dynamic,
        };
        self.current = Some(scene.clone());

        let s = &mut self.stats;
        s.frames_ingested += 1;
        s.retained_gaussians = scene.len();
        s.retained_tokens = self.tokens.iter().map(|t| t.rows()).sum();
        s.peak_gaussians = s.peak_gaussians.max(s.retained_gaussians);
        s.peak_tokens = s.peak_tokens.max(s.retained_tokens);
        log::debug!("ingested frame {}: {} static, {} dynamic", frame.timestamp, si.len(), di.len());
        Ok(IngestOutput { scene, attended, num_static: si.len(), num_dynamic: di.len() })
    }
}

/// Union of every snapshot warped by `Γ(tau - t_snapshot)`.
pub fn compose_offline(snapshots: &[(f64, Vec<GaussianPrimitive>)], tau: f64) -> Result<Vec<GaussianPrimitive>> {
    if snapshots.is_empty() {
        return Err(Error::invalid("snapshots", "at least one snapshot is required"));
    }
    let lo = snapshots.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = snapshots.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    if !(tau >= lo && tau <= hi) {
        return Err(Error::invalid("query time", format!("{tau} is outside the observed window [{lo}, {hi}]")));
    }
    Ok(snapshots.iter().flat_map(|(t, gs)| warp_gaussians(gs, tau - t)).collect())
}
