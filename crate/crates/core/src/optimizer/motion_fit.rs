use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{lr_decay, sample_frames, Adam, BestTracker, FitConfig, FitOutput, FitReport, FrameObservation, LossRecord, Stage};
use crate::error::{Error, Result};
use crate::losses::{loss_depth, loss_reg, loss_rgb, loss_sky, loss_total, LossComponents};
use crate::motion::{taylor_weight, warp_gaussians, MotionCoefficients};
use crate::render::{render, render_backward, RenderCotangent, RenderOptions};
use crate::scene::{logit, normalize_quat, sigmoid, GaussianPrimitive, MAX_SCALE, MIN_SCALE};

/// Per-Gaussian parameters: `4 L` motion entries, then 14 geometry entries when trainable
/// (`mu`, `ln s`, raw `q`, `logit alpha`, `logit c`).
#[derive(Clone, Copy)]
struct Layout {
    orders: usize,
    geometry: bool,
}

const GEOMETRY_LEN: usize = 14;
const PROB_CLAMP: f64 = 1e-6;

impl Layout {
    fn stride(&self) -> usize {
        4 * self.orders + if self.geometry { GEOMETRY_LEN } else { 0 }
    }

    fn pack(&self, gs: &[GaussianPrimitive]) -> Vec<f64> {
        let mut p = Vec::with_capacity(gs.len() * self.stride());
        for g in gs {
            for t in g.motion.terms() {
                p.push(t.speed());
                p.extend(t.direction().iter());
            }
            if self.geometry {
                p.extend(g.mu.iter());
                p.extend(g.s.iter().map(|s| s.ln()));
                p.extend(g.q);
                p.push(logit(g.alpha.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)));
                p.extend(g.c.iter().map(|c| logit(c.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))));
            }
        }
        p
    }

    fn unpack(&self, p: &[f64], base: &[GaussianPrimitive]) -> Vec<GaussianPrimitive> {
        let stride = self.stride();
        base.iter()
            .enumerate()
            .map(|(i, b)| {
                let mut g = b.clone();
                let x = &p[i * stride..(i + 1) * stride];
                for l in 0..self.orders {
                    let o = 4 * l;
                    g.motion.set_term(l, x[o], Vector3::new(x[o + 1], x[o + 2], x[o + 3]));
                }
                if self.geometry {
                    let x = &x[4 * self.orders..];
                    g.mu = Vector3::new(x[0], x[1], x[2]);
                    g.s = Vector3::new(x[3].exp(), x[4].exp(), x[5].exp());
                    g.q = [x[6], x[7], x[8], x[9]];
                    g.alpha = sigmoid(x[10]);
                    g.c = Vector3::new(sigmoid(x[11]), sigmoid(x[12]), sigmoid(x[13]));
                }
                g
            })
            .collect()
    }

    /// Order `l` gets `lr_motion * T / w_l(T)` so every order moves `Γ(T)` equally,
    /// where `T` is the largest supervision offset.
    fn learning_rates(&self, n: usize, cfg: &FitConfig, horizon: f64) -> Vec<f64> {
        let lr = &cfg.learning_rates;
        let mut one: Vec<f64> = (0..self.orders)
            .flat_map(|l| [lr.motion * horizon / taylor_weight(l, horizon); 4])
            .collect();
        if self.geometry {
            one.extend([lr.geometry; 10]);
            one.extend([lr.appearance; 4]);
        }
        one.iter().copied().cycle().take(n * one.len()).collect()
    }

    fn clamp(&self, p: &mut [f64]) {
        if !self.geometry {
            return;
        }
        let stride = self.stride();
        let (lo, hi) = (MIN_SCALE.ln(), MAX_SCALE.ln());
        for chunk in p.chunks_mut(stride) {
            let x = &mut chunk[4 * self.orders..];
            for v in &mut x[3..6] {
                *v = v.clamp(lo, hi);
            }
            let q = [x[6], x[7], x[8], x[9]];
            if let Ok(q) = normalize_quat(&q) {
                x[6..10].copy_from_slice(&q);
            }
        }
    }
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n: f64 = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Fit motion (and optionally geometry) so that warped renders match each frame.
///
/// Frame `j` is compared against the scene warped by `timestamp_j - scene_time`.
/// During the first `horizon_warmup` of the iterations only frames within a
/// growing offset of the scene time are used. Returns the state with the
/// lowest total loss over the full window; the initial state is a candidate.
pub fn fit_motion(
    gaussians: &[GaussianPrimitive],
    scene_time: f64,
    frames: &[FrameObservation],
    cfg: &FitConfig,
) -> Result<FitOutput> {
    let started = Instant::now();
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::invalid("frames", "at least one frame is required"));
    }
    for f in frames {
        f.validate()?;
    }
    if !frames.iter().any(|f| f.timestamp != scene_time) {
        return Err(Error::invalid("frames", "motion needs a supervision frame at a timestamp other than the scene's"));
    }
    for g in gaussians {
        g.validate()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base: Vec<GaussianPrimitive> = gaussians
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.motion = if cfg.reinit_motion {
                let terms: Vec<_> = (0..cfg.motion_orders).map(|_| (0.0, random_unit(&mut rng))).collect();
                MotionCoefficients::new(&terms).expect("finite init")
            } else {
                g.motion.with_orders(cfg.motion_orders)
            };
            g
        })
        .collect();

    let layout = Layout { orders: cfg.motion_orders, geometry: cfg.train_geometry };
    let stride = layout.stride();
    let mut params = layout.pack(&base);
    let horizon = frames.iter().map(|f| (f.timestamp - scene_time).abs()).fold(0.0, f64::max);
    let lrs = layout.learning_rates(base.len(), cfg, horizon);
    let mut adam = Adam::new(params.len(), cfg.adam);
    let perceptual = cfg.perceptual.build();
    let options = RenderOptions::default().with_background(cfg.background);
    let offsets: Vec<f64> = frames.iter().map(|f| (f.timestamp - scene_time).abs()).collect();
    let nearest = offsets.iter().copied().fold(f64::INFINITY, f64::min);
    let warmup = ((cfg.horizon_warmup * cfg.iterations as f64).floor() as usize).min(cfg.iterations - 1);
    let mut tracker = BestTracker::new();
    let mut trace = Vec::with_capacity(cfg.iterations);

    let report = |trace: Vec<LossRecord>, best: (usize, f64)| FitReport {
        seed: cfg.seed,
        iterations: cfg.iterations,
        trace,
        best_iteration: best.0,
        best_loss: best.1,
        wall_clock: started.elapsed(),
    };

    let evaluate = |params: &[f64], picked: &[usize]| -> Result<Evaluation> {
        let gs = layout.unpack(params, &base);
        let n_depth = picked.iter().filter(|&&j| frames[j].depth.is_some()).count();
        let n_sky = picked.iter().filter(|&&j| frames[j].sky_mask.is_some()).count();
        let presence = LossComponents {
            depth: (n_depth > 0).then_some(0.0),
            sky: (n_sky > 0).then_some(0.0),
            ..Default::default()
        };
        let scales = loss_total(&presence, &cfg.weights).scales;

        let mut comps = presence;
        let mut grad = vec![0.0; params.len()];
        let mut failure: Option<String> = None;
        for &j in picked {
            let frame = &frames[j];
            let dt = frame.timestamp - scene_time;
            let warped = warp_gaussians(&gs, dt);
            let out = render(&warped, &frame.camera, &options)?;
            let (w, h) = (frame.camera.width as usize, frame.camera.height as usize);
            let rgb = loss_rgb(&out.rgb, &frame.rgb, w, h, perceptual.as_ref(), cfg.weights.lambda_lpips)?;
            comps.rgb += rgb.value / picked.len() as f64;
            let mut cot = RenderCotangent {
                rgb: Some(rgb.grad.iter().map(|g| g * scales.rgb / picked.len() as f64).collect()),
                ..Default::default()
            };
            if let (Some(d), Some(mask)) = (&frame.depth, frame.depth_mask()) {
                let l = loss_depth(&out.depth, d, &mask)?;
                *comps.depth.as_mut().unwrap() += l.value / n_depth as f64;
                cot.depth = Some(l.grad.iter().map(|g| g * scales.depth / n_depth as f64).collect());
            }
            if let Some(mask) = &frame.sky_mask {
                let l = loss_sky(&out.alpha, mask)?;
                *comps.sky.as_mut().unwrap() += l.value / n_sky as f64;
                cot.alpha = Some(l.grad.iter().map(|g| g * scales.sky / n_sky as f64).collect());
            }
            let rg = render_backward(&warped, &frame.camera, &out, &cot, Some(dt))?;
            let motion = rg.motion.as_ref().expect("warp offset given");
            for i in 0..gs.len() {
                let x = &mut grad[i * stride..(i + 1) * stride];
                for (l, og) in motion[i].iter().enumerate().take(layout.orders) {
                    x[4 * l] += og.speed;
                    for k in 0..3 {
                        x[4 * l + 1 + k] += og.direction[k];
                    }
                }
                if layout.geometry {
                    let x = &mut x[4 * layout.orders..];
                    let g = &gs[i];
                    for k in 0..3 {
                        x[k] += rg.mu[i][k];
                        x[3 + k] += rg.s[i][k] * g.s[k];
                        x[11 + k] += rg.c[i][k] * g.c[k] * (1.0 - g.c[k]);
                    }
                    for k in 0..4 {
                        x[6 + k] += rg.q[i][k];
                    }
                    x[10] += rg.alpha[i] * g.alpha * (1.0 - g.alpha);
                }
            }
            if !rgb.value.is_finite() && failure.is_none() {
                failure = Some(format!("photometric loss is {} on frame {j}", rgb.value));
            }
        }

        let reg = loss_reg(&gs);
        comps.reg = reg.value;
        for (i, per) in reg.grad.iter().enumerate() {
            for (l, og) in per.iter().enumerate() {
                let x = &mut grad[i * stride + 4 * l..i * stride + 4 * l + 4];
                x[0] += scales.reg * og.speed;
                for k in 0..3 {
                    x[1 + k] += scales.reg * og.direction[k];
                }
            }
        }

        let total = loss_total(&comps, &cfg.weights).value;
        let failure = if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            Some(failure.unwrap_or_else(|| format!("total loss is {total}")))
        } else {
            None
        };
        Ok(Evaluation { comps, total, grad, failure })
    };

    let diverged = |it: usize, reason: String, tracker: &BestTracker<Vec<f64>>, params: &[f64], trace: Vec<LossRecord>| {
        let last = tracker.last_finite.clone().unwrap_or_else(|| params.to_vec());
        let best = tracker.best.as_ref().map_or((it, f64::NAN), |(i, l, _)| (*i, *l));
        Error::Diverged {
            iteration: it,
            reason,
            last_finite: Box::new(FitOutput {
                gaussians: layout.unpack(&last, &base),
                decoder: None,
                report: report(trace, best),
            }),
        }
    };

    if warmup > 0 {
        let all: Vec<usize> = (0..frames.len()).collect();
        let e = evaluate(&params, &all)?;
        if let Some(reason) = e.failure {
            return Err(diverged(0, reason, &tracker, &params, Vec::new()));
        }
        tracker.observe(0, e.total, &params);
    }

    for it in 0..cfg.iterations {
        let full_window = it >= warmup;
        let reach = if full_window {
            horizon
        } else {
            nearest + (horizon - nearest) * it as f64 / warmup as f64
        };
        let available: Vec<usize> = (0..frames.len()).filter(|&j| full_window || offsets[j] <= reach).collect();
        let picked = sample_frames(&mut rng, &available, cfg.samples_per_iter);
        let Evaluation { comps, total, grad, failure } = evaluate(&params, &picked)?;
        if let Some(reason) = failure {
            return Err(diverged(it, reason, &tracker, &params, trace));
        }
        if full_window {
            tracker.observe(it, total, &params);
        } else {
            tracker.last_finite = Some(params.clone());
        }
        trace.push(LossRecord { iteration: it, stage: Stage::Motion, total, components: comps });
        log::debug!("fit_motion iter {it}: total {total:.6e}");

        let decay = lr_decay(cfg.lr_final_ratio, it, cfg.iterations);
        let step_lrs: Vec<f64> = lrs.iter().map(|lr| lr * decay).collect();
        adam.step(&mut params, &grad, &step_lrs);
        layout.clamp(&mut params);
    }

    let (best_it, best_loss, best_params) = tracker.best.expect("the last iteration sees the full window");
    Ok(FitOutput {
        gaussians: layout.unpack(&best_params, &base),
        decoder: None,
        report: report(trace, (best_it, best_loss)),
    })
}

struct Evaluation {
    comps: LossComponents,
    total: f64,
    grad: Vec<f64>,
    failure: Option<String>,
}
