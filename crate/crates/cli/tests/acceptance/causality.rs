use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat4d::streaming::{blocks_from_dense, windowed_causal_attention, TokenBlock};

use crate::ensure;

const T: usize = 6;
const N: usize = 5;
const D: usize = 8;
const HEADS: usize = 2;
const TOL: f64 = 1e-6;

fn random_dense(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..T * N * D).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// All `T N` tokens in one matrix, a `T N × T N` boolean mask, and a plain
/// softmax per row and head.
fn dense_oracle(x: &[f64], window: usize) -> Vec<f64> {
    let rows = T * N;
    let hd = D / HEADS;
    let frame = |i: usize| i / N;
    let mut mask = vec![vec![false; rows]; rows];
    for i in 0..rows {
        for j in 0..rows {
            mask[i][j] = frame(j) <= frame(i) && frame(i) - frame(j) < window;
        }
    }
    let mut out = vec![0.0; rows * D];
    for i in 0..rows {
        for h in 0..HEADS {
            let mut logits = vec![f64::NEG_INFINITY; rows];
            for j in 0..rows {
                if mask[i][j] {
                    let dot: f64 = (0..hd).map(|c| x[i * D + h * hd + c] * x[j * D + h * hd + c]).sum();
                    logits[j] = dot / (hd as f64).sqrt();
                }
            }
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..rows {
                let p = logits[j].exp() / z;
                for c in 0..hd {
                    out[i * D + h * hd + c] += p * x[j * D + h * hd + c];
                }
            }
        }
    }
    out
}

fn bits(blocks: &[TokenBlock]) -> Vec<u64> {
    blocks.iter().flat_map(|b| b.data().iter().map(|v| v.to_bits())).collect()
}

pub fn run() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut perturbations = 0;
    for window in [1, 3, usize::MAX] {
        for _ in 0..10 {
            let x = random_dense(&mut rng);
            let frames = blocks_from_dense(T, N, D, &x).map_err(|e| e.to_string())?;
            let out = windowed_causal_attention(&frames, window, HEADS).map_err(|e| e.to_string())?;

            let oracle = dense_oracle(&x, window);
            let got: Vec<f64> = out.iter().flat_map(|b| b.data().iter().copied()).collect();
            let err = got.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(err <= TOL, || format!("window {window}: dense oracle differs by {err:e}"))?;
            worst = worst.max(err);

            for t in 0..T - 1 {
                let mut y = x.clone();
                for v in &mut y[(t + 1) * N * D..] {
                    *v += rng.random_range(-5.0..5.0);
                }
                let perturbed = blocks_from_dense(T, N, D, &y).map_err(|e| e.to_string())?;
                let after = windowed_causal_attention(&perturbed, window, HEADS).map_err(|e| e.to_string())?;
                ensure(bits(&out[..=t]) == bits(&after[..=t]), || {
                    format!("window {window}: frames <= {t} changed when later frames were perturbed")
                })?;
                perturbations += 1;
            }
        }
    }
    Ok(format!("{perturbations} future perturbations left past outputs bitwise unchanged, dense-mask oracle max difference {worst:.1e} (tol {TOL:e})"))
}
