use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat4d::motion::MotionCoefficients;

use crate::ensure;

const SAMPLES: usize = 10_000;
const TOL: f64 = 1e-12;

/// `Σ_l s_l v_l/|v_l| Δt^{l+1}/(l+1)!`, one term at a time.
fn oracle(terms: &[(f64, Vector3<f64>)], dt: f64) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    for (l, (speed, dir)) in terms.iter().enumerate() {
        let m = dir / dir.norm() * *speed;
        let mut factorial = 1.0;
        for k in 2..=l + 1 {
            factorial *= k as f64;
        }
        sum += m * dt.powi(l as i32 + 1) / factorial;
    }
    sum
}

pub fn run() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for i in 0..SAMPLES {
        let orders = rng.random_range(1..=3);
        let terms: Vec<(f64, Vector3<f64>)> = (0..orders)
            .map(|_| (rng.random_range(-3.0..3.0), Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))))
            .collect();
        let dt = rng.random_range(-5.0..5.0);
        let m = MotionCoefficients::new(&terms).map_err(|e| e.to_string())?;
        let got = m.displacement(dt);
        let want = oracle(&terms, dt);
        let err = (got - want).amax() / want.amax().max(1.0);
        ensure(err <= TOL, || format!("sample {i}: {got:?} vs oracle {want:?}"))?;
        worst = worst.max(err);
        let zero = m.displacement(0.0);
        ensure(zero.iter().all(|v| *v == 0.0), || format!("sample {i}: Γ(0) = {zero:?}"))?;
    }
    Ok(format!("{SAMPLES} samples, worst error {worst:.1e} (tol {TOL:e}, relative above unit magnitude), Γ(0) = 0 exactly"))
}
