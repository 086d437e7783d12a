use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lr_decay, sample_frames, Adam, BestTracker, FitConfig, FitOutput, FitReport, FrameObservation, LossRecord, Stage};
use crate::error::{Error, Result};
use crate::losses::{loss_cls, loss_sem, loss_total, FeatMode, LossComponents, LossWeights};
use crate::motion::warp_gaussians;
use crate::render::{render, render_backward, RenderCotangent, RenderOptions};
use crate::scene::GaussianPrimitive;
use crate::semantics::{FeatureDecoder, TextEmbeddingBank};

/// Distill per-Gaussian features and the decoder.
///
/// Runs `cfg.stages.sem_iterations` against teacher feature maps, then
/// `cfg.stages.cls_iterations` against label maps scored with `bank`.
/// Geometry, appearance and motion are held fixed; each frame is rendered at
/// `timestamp - scene_time`. The returned state is the best one seen in the
/// last stage that ran. Trace records carry only the feature term.
pub fn fit_semantics(
    gaussians: &[GaussianPrimitive],
    scene_time: f64,
    decoder: &FeatureDecoder,
    frames: &[FrameObservation],
    bank: Option<&TextEmbeddingBank>,
    cfg: &FitConfig,
) -> Result<FitOutput> {
    let started = Instant::now();
    cfg.validate()?;
    let stages = cfg.stages;
    if stages.sem_iterations + stages.cls_iterations == 0 {
        return Err(Error::invalid("stages", "at least one semantic iteration is required"));
    }
    for f in frames {
        f.validate()?;
    }
    for g in gaussians {
        g.validate()?;
        if g.feature.len() != decoder.in_dim() {
            return Err(Error::shape("gaussian feature", decoder.in_dim(), g.feature.len()));
        }
    }
    let sem_frames: Vec<usize> = (0..frames.len()).filter(|&j| frames[j].teacher_features.is_some()).collect();
    let cls_frames: Vec<usize> = (0..frames.len()).filter(|&j| frames[j].labels.is_some()).collect();
    if stages.sem_iterations > 0 {
        if sem_frames.is_empty() {
            return Err(Error::invalid("frames", "the feature regression stage needs teacher features"));
        }
        for &j in &sem_frames {
            let want = frames[j].camera.num_pixels() * decoder.out_dim();
            let got = frames[j].teacher_features.as_ref().unwrap().len();
            if got != want {
                return Err(Error::shape(format!("teacher features of frame {j}"), want, got));
            }
        }
    }
    if stages.cls_iterations > 0 {
        let bank = bank.ok_or_else(|| Error::invalid("text bank", "the classification stage needs a text bank"))?;
        if cls_frames.is_empty() {
            return Err(Error::invalid("frames", "the classification stage needs label maps"));
        }
        if bank.dim() != decoder.out_dim() {
            return Err(Error::shape("text bank dimension", decoder.out_dim(), bank.dim()));
        }
    }

    let n = gaussians.len();
    let fdim = decoder.in_dim();
    let train_decoder = !cfg.freeze_decoder;
    let feature_len = n * fdim;
    let mut params: Vec<f64> = gaussians.iter().flat_map(|g| g.feature.iter().copied()).collect();
    if train_decoder {
        params.extend_from_slice(decoder.params());
    }
    let mut lrs = vec![cfg.learning_rates.feature; feature_len];
    lrs.resize(params.len(), cfg.learning_rates.decoder);

    let unpack = |p: &[f64]| -> (Vec<GaussianPrimitive>, FeatureDecoder) {
        let gs = gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut g = g.clone();
                g.feature.copy_from_slice(&p[i * fdim..(i + 1) * fdim]);
                g
            })
            .collect();
        let mut d = decoder.clone();
        if train_decoder {
            d.params_mut().copy_from_slice(&p[feature_len..]);
        }
        (gs, d)
    };

    let options = RenderOptions::default().with_features().with_background(cfg.background);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let mut tracker = BestTracker::new();
    let mut iteration = 0;
    let schedule = [
        (Stage::Sem, stages.sem_iterations, &sem_frames, FeatMode::Sem),
        (Stage::Cls, stages.cls_iterations, &cls_frames, FeatMode::Cls),
    ];
    for (stage, iters, available, mode) in schedule {
        if iters == 0 {
            continue;
        }
        let weights = LossWeights { feat_mode: mode, ..cfg.weights };
        let mut adam = Adam::new(params.len(), cfg.adam);
        tracker = BestTracker::new();
        for k in 0..iters {
            let (gs, dec) = unpack(&params);
            let picked = sample_frames(&mut rng, available, cfg.samples_per_iter);
            let mut comps = LossComponents::default();
            let presence = match mode {
                FeatMode::Sem => LossComponents { sem: Some(0.0), ..Default::default() },
                FeatMode::Cls => LossComponents { cls: Some(0.0), ..Default::default() },
            };
            let scales = loss_total(&presence, &weights).scales;
            let scale = match mode {
                FeatMode::Sem => scales.sem,
                FeatMode::Cls => scales.cls,
            } / picked.len() as f64;
            let mut grad = vec![0.0; params.len()];
            let mut feat_loss = 0.0;
            for &j in picked.iter() {
                let frame = &frames[j];
                let dt = frame.timestamp - scene_time;
                let warped = warp_gaussians(&gs, dt);
                let out = render(&warped, &frame.camera, &options)?;
                let rendered = out.feature.as_ref().expect("features requested");
                let decoded = dec.decode(rendered)?;
                let l = match mode {
                    FeatMode::Sem => loss_sem(&decoded, frame.teacher_features.as_ref().unwrap())?,
                    FeatMode::Cls => loss_cls(&decoded, bank.unwrap(), frame.labels.as_ref().unwrap())?,
                };
                feat_loss += l.value / picked.len() as f64;
                let g_dec: Vec<f64> = l.grad.iter().map(|g| g * scale).collect();
                let (g_feat, g_params) = dec.backward(rendered, &g_dec)?;
                if train_decoder {
                    grad[feature_len..].iter_mut().zip(&g_params).for_each(|(a, b)| *a += b);
                }
                let cot = RenderCotangent { feature: Some(g_feat), ..Default::default() };
                let rg = render_backward(&warped, &frame.camera, &out, &cot, None)?;
                for (i, f) in rg.feature.iter().enumerate() {
                    grad[i * fdim..(i + 1) * fdim].iter_mut().zip(f).for_each(|(a, b)| *a += b);
                }
            }
            match mode {
                FeatMode::Sem => comps.sem = Some(feat_loss),
                FeatMode::Cls => comps.cls = Some(feat_loss),
            }
            let total = loss_total(&comps, &weights).value;
            let report_so_far = |trace: Vec<LossRecord>, best: (usize, f64)| FitReport {
                seed: cfg.seed,
                iterations: stages.sem_iterations + stages.cls_iterations,
                trace,
                best_iteration: best.0,
                best_loss: best.1,
                wall_clock: started.elapsed(),
            };
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let last = tracker.last_finite.clone().unwrap_or_else(|| params.clone());
                let best = tracker.best.as_ref().map_or((iteration, f64::NAN), |(i, l, _)| (*i, *l));
                let (gs, d) = unpack(&last);
                return Err(Error::Diverged {
                    iteration,
                    reason: format!("feature loss is {total}"),
                    last_finite: Box::new(FitOutput {
                        gaussians: gs,
                        decoder: Some(d),
                        report: report_so_far(trace, best),
                    }),
                });
            }
            tracker.observe(iteration, total, &params);
            trace.push(LossRecord { iteration, stage, total, components: comps });
            log::debug!("fit_semantics {stage:?} iter {iteration}: {total:.6e}");
            let decay = lr_decay(cfg.lr_final_ratio, k, iters);
            let step_lrs: Vec<f64> = lrs.iter().map(|lr| lr * decay).collect();
            adam.step(&mut params, &grad, &step_lrs);
            iteration += 1;
        }
    }

    let (best_it, best_loss, best_params) = tracker.best.expect("at least one iteration");
    let (gs, d) = unpack(&best_params);
    Ok(FitOutput {
        gaussians: gs,
        decoder: Some(d),
        report: FitReport {
            seed: cfg.seed,
            iterations: iteration,
            trace,
            best_iteration: best_it,
            best_loss,
            wall_clock: started.elapsed(),
        },
    })
}
