//! A long synthetic stream with a fixed number of Gaussians and tokens per
//! frame. Retained memory must stop growing once the window is full, and the
//! cost of one ingest must not depend on how many frames came before it.

use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat4d::streaming::{MemoryStats, StreamConfig, StreamFrame, StreamState, TokenBlock};
use splat4d::{GaussianPrimitive, MotionCoefficients};

use crate::ensure;

const FRAMES: usize = 1000;
const PER_FRAME: usize = 1000;
const TOKENS: usize = 16;
const TOKEN_DIM: usize = 32;
/// Independent runs over the whole stream; each frame keeps its fastest ingest.
const PASSES: usize = 5;

/// Frame `k` (from 0), half static and half moving well above the motion threshold.
fn frame(cfg: &StreamConfig, k: usize) -> StreamFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
    let gaussians = (0..PER_FRAME)
        .map(|i| {
            let mu = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0), rng.random_range(2.0..30.0));
            let g = GaussianPrimitive::new(mu, Vector3::repeat(rng.random_range(0.05..0.5)), 0.8, Vector3::repeat(0.5));
            if i % 2 == 0 {
                g
            } else {
                let v = Vector3::new(rng.random_range(0.1..1.0), 0.0, rng.random_range(-0.5..0.5));
                g.with_motion(MotionCoefficients::from_coefficients(&[v]).unwrap())
            }
        })
        .collect();
    let data = (0..TOKENS * TOKEN_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    StreamFrame {
        timestamp: k as i64 * cfg.stride,
        gaussians,
        tokens: Some(TokenBlock::new(TOKENS, TOKEN_DIM, data).unwrap()),
    }
}

pub fn run() -> Result<String, String> {
    let cfg = StreamConfig { heads: 2, ..Default::default() };
    let mut latencies = vec![Duration::MAX; FRAMES];
    let mut at_three = MemoryStats::default();
    let mut end = MemoryStats::default();
    for pass in 0..PASSES {
        let mut state = StreamState::new(cfg).map_err(|e| e.to_string())?;
        for (k, best) in latencies.iter_mut().enumerate() {
            let f = frame(&cfg, k);
            let started = Instant::now();
            let out = state.ingest_frame(f);
            *best = (*best).min(started.elapsed());
            let out = out.map_err(|e| format!("frame {k}: {e}"))?;
            ensure(out.num_static == PER_FRAME / 2, || format!("frame {k}: {} static", out.num_static))?;
            if k == 2 && pass == 0 {
                at_three = state.memory();
            }
        }
        end = state.memory();
    }
    ensure(end.peak_gaussians == at_three.peak_gaussians, || {
        format!("peak Gaussians {} after 3 frames, {} after {FRAMES}", at_three.peak_gaussians, end.peak_gaussians)
    })?;
    ensure(end.peak_tokens == at_three.peak_tokens, || {
        format!("peak tokens {} after 3 frames, {} after {FRAMES}", at_three.peak_tokens, end.peak_tokens)
    })?;
    let base = latencies[2];
    let (worst_k, worst) = latencies.iter().enumerate().skip(2).max_by_key(|(_, d)| **d).unwrap();
    ensure(*worst <= base * 2, || format!("frame {} took {worst:?}, frame 3 took {base:?}", worst_k + 1))?;
    Ok(format!(
        "{FRAMES} frames, peak {} Gaussians / {} tokens (same as after frame 3), frame 3 {base:?}, slowest later frame {worst:?} ({:.2}x)",
        end.peak_gaussians,
        end.peak_tokens,
        worst.as_secs_f64() / base.as_secs_f64()
    ))
}
