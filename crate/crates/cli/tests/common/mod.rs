//! Shared helpers for the CLI tests and the acceptance runner.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{vector, Matrix3, Vector3};
use rand::Rng;
use splat4d::{CameraModel, GaussianPrimitive};

pub fn splat4d() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splat4d"))
}

pub fn run(args: &[&str], cwd: &Path) -> Output {
    splat4d().args(args).current_dir(cwd).output().expect("binary runs")
}

/// Per-pixel compositing with no tiling or culling: every Gaussian is tested
/// against every pixel center in (depth, index) order.
pub struct Oracle {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub feature: Vec<f64>,
}

struct Splat {
    id: usize,
    z: f64,
    u: f64,
    v: f64,
    inv: [[f64; 2]; 2],
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn splat(id: usize, g: &GaussianPrimitive, cam: &CameraModel) -> Option<Splat> {
    let w = rows(&cam.rotation);
    let k = rows(&cam.intrinsics);
    let p: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| w[i][j] * g.mu[j]).sum::<f64>() + cam.translation[i]);
    if !(p[2] > cam.near) {
        return None;
    }
    // u = (k0 . p) / (k2 . p), v = (k1 . p) / (k2 . p)
    let kp: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| k[i][j] * p[j]).sum());
    let (u, v) = (kp[0] / kp[2], kp[1] / kp[2]);
    let jac: [[f64; 3]; 2] = std::array::from_fn(|r| std::array::from_fn(|c| (k[r][c] - kp[r] / kp[2] * k[2][c]) / kp[2]));

    let n = g.q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [qw, qx, qy, qz] = g.q.map(|x| x / n);
    let rot = [
        [1.0 - 2.0 * (qy * qy + qz * qz), 2.0 * (qx * qy - qw * qz), 2.0 * (qx * qz + qw * qy)],
        [2.0 * (qx * qy + qw * qz), 1.0 - 2.0 * (qx * qx + qz * qz), 2.0 * (qy * qz - qw * qx)],
        [2.0 * (qx * qz - qw * qy), 2.0 * (qy * qz + qw * qx), 1.0 - 2.0 * (qx * qx + qy * qy)],
    ];
    let s2 = [[g.s[0] * g.s[0], 0.0, 0.0], [0.0, g.s[1] * g.s[1], 0.0], [0.0, 0.0, g.s[2] * g.s[2]]];
    let sigma = matmul(&matmul(&rot, &s2), &transpose(&rot));
    let sigma_cam = matmul(&matmul(&w, &sigma), &transpose(&w));
    let mut cov = [[0.0; 2]; 2];
    for (r, row) in cov.iter_mut().enumerate() {
        for (c, out) in row.iter_mut().enumerate() {
            *out = (0..3)
                .map(|a| (0..3).map(|b| jac[r][a] * sigma_cam[a][b] * jac[c][b]).sum::<f64>())
                .sum::<f64>();
        }
    }
    cov[0][0] += 0.3;
    cov[1][1] += 0.3;
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
    Some(Splat { id, z: p[2], u, v, inv })
}

pub fn brute_force_render(gs: &[GaussianPrimitive], cam: &CameraModel, background: [f64; 3], fdim: usize) -> Oracle {
    let mut splats: Vec<Splat> = gs.iter().enumerate().filter_map(|(i, g)| splat(i, g, cam)).collect();
    splats.sort_by(|a, b| a.z.total_cmp(&b.z).then(a.id.cmp(&b.id)));
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut out = Oracle {
        rgb: vec![0.0; w * h * 3],
        depth: vec![0.0; w * h],
        alpha: vec![0.0; w * h],
        feature: vec![0.0; w * h * fdim],
    };
    for y in 0..h {
        for x in 0..w {
            let pix = y * w + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut acc_depth = 0.0;
            for s in &splats {
                let (dx, dy) = (px - s.u, py - s.v);
                let maha = dx * (s.inv[0][0] * dx + s.inv[0][1] * dy) + dy * (s.inv[1][0] * dx + s.inv[1][1] * dy);
                if maha > 9.0 {
                    continue;
                }
                let g = &gs[s.id];
                let a = g.alpha * (-0.5 * maha).exp();
                if a <= 0.0 {
                    continue;
                }
                let wgt = a * t;
                for ch in 0..3 {
                    out.rgb[pix * 3 + ch] += wgt * g.c[ch];
                }
                for d in 0..fdim {
                    out.feature[pix * fdim + d] += wgt * g.feature[d];
                }
                out.alpha[pix] += wgt;
                acc_depth += wgt * s.z;
                t *= 1.0 - a;
                if t == 0.0 {
                    break;
                }
            }
            for ch in 0..3 {
                out.rgb[pix * 3 + ch] += t * background[ch];
            }
            out.depth[pix] = if out.alpha[pix] > 0.0 { acc_depth / out.alpha[pix] } else { 0.0 };
        }
    }
    out
}

pub fn random_quat<R: Rng>(rng: &mut R) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
    q.map(|v| v / n)
}

/// Up to `max` Gaussians scattered around and partly outside a 32x32 view.
pub fn random_scene<R: Rng>(rng: &mut R, max: usize) -> Vec<GaussianPrimitive> {
    let n = rng.random_range(1..=max);
    (0..n)
        .map(|_| {
            let z = rng.random_range(-0.5..8.0);
            let mu = vector![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), z];
            let s = Vector3::from_fn(|_, _| rng.random_range(0.02..0.5));
            let c = Vector3::from_fn(|_, _| rng.random::<f64>());
            let mut g = GaussianPrimitive::new(mu, s, rng.random_range(0.0..1.0), c)
                .with_feature((0..splat4d::scene::FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect());
            g.q = random_quat(rng);
            g
        })
        .collect()
}

/// A 32x32 camera with a small random pose.
pub fn random_camera<R: Rng>(rng: &mut R) -> CameraModel {
    let mut k = Matrix3::identity();
    k[(0, 0)] = rng.random_range(20.0..40.0);
    k[(1, 1)] = k[(0, 0)] * rng.random_range(0.9..1.1);
    k[(0, 1)] = rng.random_range(-0.5..0.5);
    k[(0, 2)] = 16.0 + rng.random_range(-1.0..1.0);
    k[(1, 2)] = 16.0 + rng.random_range(-1.0..1.0);
    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let rot = nalgebra::Rotation3::from_scaled_axis(axis * 0.1).into_inner();
    let t = vector![rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.0..0.5)];
    CameraModel::new(k, rot, t, 32, 32).unwrap()
}

/// Files for end-to-end runs: a scene, a supervision manifest, a streaming
/// manifest, a decoder, a text bank and ground-truth flow.
pub struct Workspace {
    pub truth: Vec<GaussianPrimitive>,
    pub camera: CameraModel,
}

pub const WS_SIZE: u32 = 24;

pub fn write_workspace(dir: &Path) -> Workspace {
    use rand::SeedableRng;
    use splat4d::io::{self, Scene, Tensor};
    use splat4d::motion::{flow_field, warp_gaussians, MotionCoefficients};
    use splat4d::semantics::FeatureDecoder;
    use splat4d::RenderOptions;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let camera = CameraModel::pinhole(WS_SIZE, WS_SIZE, 24.0);
    let truth: Vec<GaussianPrimitive> = [
        (vector![-0.5, -0.3, 3.0], vector![0.9, 0.3, 0.2], vector![0.2, 0.0, 0.0]),
        (vector![0.5, 0.0, 3.5], vector![0.2, 0.8, 0.3], vector![0.0, 0.0, 0.0]),
        (vector![0.0, 0.5, 3.2], vector![0.2, 0.3, 0.9], vector![0.0, -0.15, 0.0]),
    ]
    .into_iter()
    .map(|(mu, c, v)| {
        GaussianPrimitive::new(mu, Vector3::repeat(0.3), 0.9, c)
            .with_feature((0..splat4d::scene::FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
            .with_motion(MotionCoefficients::from_coefficients(&[v]).unwrap())
    })
    .collect();
    let still: Vec<GaussianPrimitive> =
        truth.iter().map(|g| g.clone().with_motion(MotionCoefficients::zeros(3))).collect();
    io::save_scene(dir.join("scene.json"), &Scene::new(0.0, vec![camera.clone()], still)).unwrap();

    let decoder = FeatureDecoder::random(splat4d::scene::FEATURE_DIM, 16, 8, &mut rng).unwrap();
    io::save_decoder(dir.join("decoder.json"), &decoder).unwrap();
    let emb: Vec<Vec<f64>> = (0..2).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let bank_json = serde_json::json!({"labels": ["left", "right"], "embeddings": emb});
    std::fs::write(dir.join("bank.json"), bank_json.to_string()).unwrap();

    let (w, h) = (WS_SIZE as usize, WS_SIZE as usize);
    let opts = RenderOptions::default().with_features();
    let mut frames = Vec::new();
    for t in 0..3 {
        let out = splat4d::render(&warp_gaussians(&truth, t as f64), &camera, &opts).unwrap();
        io::write_rgb(dir.join(format!("image_{t}.png")), WS_SIZE, WS_SIZE, &out.rgb).unwrap();
        let depth: Vec<f64> = out.depth.iter().zip(&out.alpha).map(|(d, a)| if *a > 0.5 { *d } else { 0.0 }).collect();
        io::write_tensor(dir.join(format!("depth_{t}.g4dt")), &Tensor::from_f64(vec![h, w], &depth).unwrap()).unwrap();
        let sky: Vec<f64> = out.alpha.iter().map(|&a| if a < 0.01 { 1.0 } else { 0.0 }).collect();
        io::write_gray(dir.join(format!("sky_{t}.png")), WS_SIZE, WS_SIZE, &sky).unwrap();
        let teacher = decoder.decode(out.feature.as_ref().unwrap()).unwrap();
        io::write_tensor(dir.join(format!("features_{t}.g4dt")), &Tensor::from_f64(vec![h, w, 8], &teacher).unwrap())
            .unwrap();
        let labels: Vec<f64> = (0..w * h).map(|p| if p % w >= w / 2 { 1.0 / 255.0 } else { 0.0 }).collect();
        io::write_gray(dir.join(format!("labels_{t}.png")), WS_SIZE, WS_SIZE, &labels).unwrap();
        frames.push(serde_json::json!({
            "timestamp": t as f64,
            "image": format!("image_{t}.png"),
            "depth": format!("depth_{t}.g4dt"),
            "sky_mask": format!("sky_{t}.png"),
            "features": format!("features_{t}.g4dt"),
            "labels": format!("labels_{t}.png"),
        }));
    }
    let cam_json = serde_json::to_value(io::CameraRecord::from(&camera)).unwrap();
    let manifest = serde_json::json!({"cameras": [cam_json.clone()], "frames": frames});
    std::fs::write(dir.join("manifest.json"), manifest.to_string()).unwrap();

    let mut stream_frames = Vec::new();
    for k in 0..4 {
        let t = 5 * k;
        let gs = warp_gaussians(&truth, t as f64);
        io::save_scene(dir.join(format!("frame_{t}.json")), &Scene::new(t as f64, vec![], gs)).unwrap();
        let tokens: Vec<f64> = (0..4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        io::write_tensor(dir.join(format!("tokens_{t}.g4dt")), &Tensor::from_f64(vec![4, 8], &tokens).unwrap()).unwrap();
        stream_frames.push(serde_json::json!({
            "timestamp": t as f64,
            "scene": format!("frame_{t}.json"),
            "tokens": format!("tokens_{t}.g4dt"),
        }));
    }
    let stream = serde_json::json!({"cameras": [cam_json], "frames": stream_frames});
    std::fs::write(dir.join("stream.json"), stream.to_string()).unwrap();

    let flow: Vec<f64> = flow_field(&truth, 1.0).iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    io::write_tensor(dir.join("flow_gt.g4dt"), &Tensor::from_f64(vec![truth.len(), 3], &flow).unwrap()).unwrap();
    Workspace { truth, camera }
}
