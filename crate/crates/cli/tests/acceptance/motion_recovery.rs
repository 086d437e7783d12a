//! Six Gaussians with velocity, acceleration and jerk, observed at five later
//! frames. Motion is fitted from renders alone and scored by endpoint error.

use nalgebra::{vector, Vector3};
use splat4d::motion::{flow_field, warp_gaussians, MotionCoefficients};
use splat4d::optimizer::{fit_motion, FitConfig, FrameObservation};
use splat4d::{render, CameraModel, GaussianPrimitive, RenderOptions};

use crate::ensure;

const TIMES: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
const ITERATIONS: usize = 3000;

fn jerk_scene() -> Vec<GaussianPrimitive> {
    let table: [(Vector3<f64>, Vector3<f64>, [Vector3<f64>; 3]); 6] = [
        (vector![-1.2, -0.8, 5.0], vector![0.9, 0.2, 0.1], [vector![0.10, 0.0, 0.0], vector![0.0, 0.04, 0.0], vector![0.0, 0.0, 0.012]]),
        (vector![0.0, -0.9, 5.5], vector![0.1, 0.9, 0.2], [vector![0.0, 0.08, 0.03], vector![0.04, 0.0, 0.0], vector![-0.01, 0.006, 0.0]]),
        (vector![1.2, -0.7, 4.5], vector![0.2, 0.2, 0.9], [vector![-0.1, 0.0, 0.0], vector![0.0, -0.03, 0.02], vector![0.0, 0.012, 0.0]]),
        (vector![-1.1, 0.8, 5.2], vector![0.9, 0.9, 0.1], [vector![0.0, -0.1, 0.0], vector![0.03, 0.0, -0.02], vector![0.012, 0.0, 0.0]]),
        (vector![0.1, 0.7, 4.8], vector![0.1, 0.9, 0.9], [vector![0.07, 0.07, 0.0], vector![0.0, 0.0, 0.04], vector![0.0, -0.01, 0.006]]),
        (vector![1.1, 0.9, 5.6], vector![0.9, 0.1, 0.9], [vector![0.0, 0.0, 0.1], vector![-0.04, 0.0, 0.0], vector![0.0, 0.012, 0.0]]),
    ];
    table
        .iter()
        .map(|(mu, c, m)| {
            GaussianPrimitive::new(*mu, Vector3::repeat(0.35), 0.95, *c)
                .with_motion(MotionCoefficients::from_coefficients(m).unwrap())
        })
        .collect()
}

fn observe(truth: &[GaussianPrimitive], cam: &CameraModel) -> Vec<FrameObservation> {
    TIMES
        .iter()
        .map(|&t| {
            let out = render(&warp_gaussians(truth, t), cam, &RenderOptions::default()).unwrap();
            let mut f = FrameObservation::new(t, cam.clone(), out.rgb).unwrap();
            f.depth = Some(out.depth.iter().zip(&out.alpha).map(|(d, a)| if *a > 0.5 { *d } else { 0.0 }).collect());
            f
        })
        .collect()
}

/// Mean endpoint error over Gaussians and supervision times.
fn epe(fitted: &[GaussianPrimitive], truth: &[GaussianPrimitive]) -> f64 {
    let mut total = 0.0;
    for &t in &TIMES {
        total += flow_field(fitted, t).iter().zip(flow_field(truth, t)).map(|(a, b)| (a - b).norm()).sum::<f64>();
    }
    total / (TIMES.len() * truth.len()) as f64
}

pub fn run() -> Result<String, String> {
    let truth = jerk_scene();
    let cam = CameraModel::pinhole(64, 64, 60.0);
    let frames = observe(&truth, &cam);
    let init: Vec<GaussianPrimitive> =
        truth.iter().map(|g| g.clone().with_motion(MotionCoefficients::zeros(3))).collect();
    let fit = |orders: usize| {
        let cfg = FitConfig { iterations: ITERATIONS, motion_orders: orders, seed: 7, ..Default::default() };
        fit_motion(&init, 0.0, &frames, &cfg).map_err(|e| format!("L={orders} fit: {e}"))
    };
    let e3 = epe(&fit(3)?.gaussians, &truth);
    let e1 = epe(&fit(1)?.gaussians, &truth);
    ensure(e3 < 0.05, || format!("L=3 EPE {e3:.4} m is not below 0.05 m"))?;
    ensure(e1 >= 3.0 * e3, || format!("L=1 EPE {e1:.4} m is not 3x the L=3 EPE {e3:.4} m"))?;
    Ok(format!("EPE L=3 {e3:.4} m (< 0.05), L=1 {e1:.4} m, ratio {:.1}x (>= 3)", e1 / e3))
}
