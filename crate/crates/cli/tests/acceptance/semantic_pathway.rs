use nalgebra::{vector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat4d::losses::loss_cls;
use splat4d::optimizer::{fit_semantics, FitConfig, FrameObservation, StageSchedule};
use splat4d::scene::FEATURE_DIM;
use splat4d::semantics::{classify, FeatureDecoder, TextEmbeddingBank};
use splat4d::{render, CameraModel, GaussianPrimitive, RenderOptions};

use crate::ensure;

const CLS_ITERATIONS: usize = 500;
const ORACLE_TOL: f64 = 1e-12;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Two Gaussians side by side; pixels are labelled by image half.
fn two_class_toy() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gs: Vec<GaussianPrimitive> = [vector![-0.5, 0.0, 2.0], vector![0.5, 0.0, 2.0]]
        .into_iter()
        .map(|mu| {
            GaussianPrimitive::new(mu, Vector3::repeat(0.45), 0.95, vector![0.5, 0.5, 0.5])
                .with_feature(random_vec(&mut rng, FEATURE_DIM))
        })
        .collect();
    let cam = CameraModel::pinhole(8, 8, 6.0);
    let labels: Vec<usize> = (0..64).map(|p| usize::from(p % 8 >= 4)).collect();
    let dec = FeatureDecoder::random(FEATURE_DIM, 32, 8, &mut rng).map_err(|e| e.to_string())?;
    let bank = TextEmbeddingBank::new(vec!["left".into(), "right".into()], random_vec(&mut rng, 16), 8)
        .map_err(|e| e.to_string())?;
    let mut frame = FrameObservation::new(0.0, cam.clone(), vec![0.0; 64 * 3]).map_err(|e| e.to_string())?;
    frame.labels = Some(labels.clone());

    let cfg = FitConfig {
        stages: StageSchedule { sem_iterations: 0, cls_iterations: CLS_ITERATIONS },
        ..Default::default()
    };
    let out = fit_semantics(&gs, 0.0, &dec, &[frame], Some(&bank), &cfg).map_err(|e| e.to_string())?;
    let rendered = render(&out.gaussians, &cam, &RenderOptions::default().with_features()).map_err(|e| e.to_string())?;
    let decoded = out.decoder.as_ref().unwrap().decode(rendered.feature.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let predicted = classify(&decoded, &bank).map_err(|e| e.to_string())?.labels;
    let correct = predicted.iter().zip(&labels).filter(|(a, b)| a == b).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

fn rescaling_invariance(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut checked = 0;
    for case in 0..200 {
        let k = rng.random_range(2..6);
        let dim = rng.random_range(2..16);
        let bank = TextEmbeddingBank::new((0..k).map(|i| format!("c{i}")).collect(), random_vec(rng, k * dim), dim)
            .map_err(|e| e.to_string())?;
        let feat = random_vec(rng, 50 * dim);
        let base = classify(&feat, &bank).map_err(|e| e.to_string())?.labels;
        let c = 10f64.powf(rng.random_range(-2.0..2.0));
        let scaled: Vec<f64> = feat.iter().map(|v| v * c).collect();
        let labels = classify(&scaled, &bank).map_err(|e| e.to_string())?.labels;
        ensure(labels == base, || format!("case {case}: labels changed under rescaling by {c}"))?;
        checked += labels.len();
    }
    Ok(checked)
}

/// Cross-entropy and its gradient with one loop over pixels and one over classes.
fn loss_cls_oracle(pred: &[f64], bank: &TextEmbeddingBank, labels: &[usize]) -> (f64, Vec<f64>) {
    let dim = bank.dim();
    let n = labels.len() as f64;
    let tau = bank.temperature();
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, &y) in labels.iter().enumerate() {
        let f = &pred[i * dim..(i + 1) * dim];
        let mut logits = Vec::new();
        for k in 0..bank.len() {
            let mut dot = 0.0;
            for d in 0..dim {
                dot += f[d] * bank.embedding(k)[d];
            }
            logits.push(dot / tau);
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        value += -(logits[y].exp() / z).ln();
        for k in 0..bank.len() {
            let p = logits[k].exp() / z;
            let indicator = if k == y { 1.0 } else { 0.0 };
            for d in 0..dim {
                grad[i * dim + d] += (p - indicator) * bank.embedding(k)[d] / tau / n;
            }
        }
    }
    (value / n, grad)
}

fn loss_cls_matches_oracle(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (k, dim) = (3, 4);
        let bank = TextEmbeddingBank::new((0..k).map(|i| format!("c{i}")).collect(), random_vec(rng, k * dim), dim)
            .map_err(|e| e.to_string())?;
        let pred = random_vec(rng, 16 * dim);
        let labels: Vec<usize> = (0..16).map(|_| rng.random_range(0..k)).collect();
        let got = loss_cls(&pred, &bank, &labels).map_err(|e| e.to_string())?;
        let (value, grad) = loss_cls_oracle(&pred, &bank, &labels);
        let mut err = (got.value - value).abs() / value.abs().max(1.0);
        for (a, b) in got.grad.iter().zip(&grad) {
            err = err.max((a - b).abs() / b.abs().max(1.0));
        }
        ensure(err <= ORACLE_TOL, || format!("case {case}: loss_cls differs from the oracle by {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn run() -> Result<String, String> {
    let accuracy = two_class_toy()?;
    ensure(accuracy == 100.0, || format!("accuracy {accuracy:.1}% after {CLS_ITERATIONS} iterations"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pixels = rescaling_invariance(&mut rng)?;
    let worst = loss_cls_matches_oracle(&mut rng)?;
    Ok(format!(
        "toy accuracy {accuracy:.0}% after {CLS_ITERATIONS} iterations, {pixels} labels stable under rescaling, \
         4x4 loss_cls oracle max difference {worst:.1e} (tol {ORACLE_TOL:e})"
    ))
}
