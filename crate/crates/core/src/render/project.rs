use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::scene::{quat_to_rotation, CameraModel, GaussianPrimitive};

/// Screen-space dilation added to every projected covariance, in pixels².
pub const COV_DILATION: f64 = 0.3;
/// Falloff is evaluated only where the Mahalanobis distance is at most this.
pub const TRUNCATION_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    /// Continuous image coordinates of the projected center.
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    /// `cov⁻¹`, stored as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Camera-space z of the center.
    pub depth: f64,
    /// Screen radius enclosing the truncated footprint.
    pub radius: f64,
    pub(crate) cam_point: Vector3<f64>,
    pub(crate) jacobian: Matrix2x3<f64>,
    pub(crate) cov_cam: Matrix3<f64>,
}

impl ProjectedGaussian {
    /// Falloff `exp(-½ dᵀ Σ⁻¹ d)` at pixel center `p`, or `None` past the truncation radius.
    #[inline]
    pub fn falloff(&self, px: f64, py: f64) -> Option<(f64, f64, f64)> {
        let dx = px - self.mean.x;
        let dy = py - self.mean.y;
        let [a, b, c] = self.conic;
        let maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if maha > TRUNCATION_SIGMA * TRUNCATION_SIGMA {
            return None;
        }
        Some(((-0.5 * maha).exp(), dx, dy))
    }
}

pub(crate) fn jacobian(k: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (t.x, t.y, t.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k[(0, 0)] * iz,
        k[(0, 1)] * iz,
        -(k[(0, 0)] * x + k[(0, 1)] * y) * iz2,
        0.0,
        k[(1, 1)] * iz,
        -k[(1, 1)] * y * iz2,
    )
}

/// EWA projection of one Gaussian. `None` when the center is not beyond the near plane.
pub fn project_gaussian(g: &GaussianPrimitive, camera: &CameraModel) -> Option<ProjectedGaussian> {
    let t = camera.world_to_camera(&g.mu);
    if !(t.z > camera.near) {
        return None;
    }
    let k = &camera.intrinsics;
    let mean = Vector2::new(
        (k[(0, 0)] * t.x + k[(0, 1)] * t.y) / t.z + k[(0, 2)],
        k[(1, 1)] * t.y / t.z + k[(1, 2)],
    );
    let m = quat_to_rotation(&g.q) * Matrix3::from_diagonal(&g.s);
    let cov_world = m * m.transpose();
    let w = &camera.rotation;
    let cov_cam = w * cov_world * w.transpose();
    let j = jacobian(k, &t);
    let cov = j * cov_cam * j.transpose() + Matrix2::identity() * COV_DILATION;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    let half_trace = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda_max = half_trace + (half_trace * half_trace - det).max(0.0).sqrt();
    Some(ProjectedGaussian {
        mean,
        cov,
        conic,
        depth: t.z,
        radius: TRUNCATION_SIGMA * lambda_max.sqrt(),
        cam_point: t,
        jacobian: j,
        cov_cam,
    })
}

/// Screen-space gradients accumulated for one Gaussian.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ScreenGrad {
    pub mean: Vector2<f64>,
    /// With respect to conic entries `(a, b, c)`.
    pub conic: [f64; 3],
    pub depth: f64,
}

/// World-space gradients for the geometric attributes.
pub(crate) struct GeometryGrad {
    pub mu: Vector3<f64>,
    pub q: [f64; 4],
    pub s: Vector3<f64>,
}

/// Pull screen-space gradients back through the projection to `mu`, `q` and `s`.
pub(crate) fn project_backward(
    g: &GaussianPrimitive,
    camera: &CameraModel,
    p: &ProjectedGaussian,
    grad: &ScreenGrad,
) -> GeometryGrad {
    let k = &camera.intrinsics;
    let w = &camera.rotation;
    let [a, b, c] = p.conic;
    let q_inv = Matrix2::new(a, b, b, c);
    // symmetric gradient on the conic matrix: the off-diagonal parameter appears twice
    let g_conic = Matrix2::new(grad.conic[0], 0.5 * grad.conic[1], 0.5 * grad.conic[1], grad.conic[2]);
    let g_cov2 = -(q_inv * g_conic * q_inv);

    let j = &p.jacobian;
    let g_cov_cam = j.transpose() * g_cov2 * j;
    let g_j = 2.0 * g_cov2 * j * p.cov_cam;

    let g_cov_world = w.transpose() * g_cov_cam * w;
    let rot = quat_to_rotation(&g.q);
    let m = rot * Matrix3::from_diagonal(&g.s);
    let g_m = 2.0 * g_cov_world * m;

    let mut g_s = Vector3::zeros();
    let mut g_rot = Matrix3::zeros();
    for col in 0..3 {
        for row in 0..3 {
            g_s[col] += g_m[(row, col)] * rot[(row, col)];
            g_rot[(row, col)] = g_m[(row, col)] * g.s[col];
        }
    }

    let t = &p.cam_point;
    let (x, y, z) = (t.x, t.y, t.z);
    let (k00, k01, k11) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let iz2 = 1.0 / (z * z);
    let iz3 = iz2 / z;
    let mut g_t = j.transpose() * grad.mean;
    g_t.z += grad.depth;
    g_t.x += g_j[(0, 2)] * (-k00 * iz2);
    g_t.y += g_j[(0, 2)] * (-k01 * iz2) + g_j[(1, 2)] * (-k11 * iz2);
    g_t.z += g_j[(0, 0)] * (-k00 * iz2)
        + g_j[(0, 1)] * (-k01 * iz2)
        + g_j[(0, 2)] * 2.0 * (k00 * x + k01 * y) * iz3
        + g_j[(1, 1)] * (-k11 * iz2)
        + g_j[(1, 2)] * 2.0 * k11 * y * iz3;

    GeometryGrad {
        mu: w.transpose() * g_t,
        q: quat_backward(&g.q, &g_rot),
        s: g_s,
    }
}

/// Gradient of `quat_to_rotation(q)` contracted with `g_rot`, including the normalization.
fn quat_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let gg = |r: usize, c: usize| g[(r, c)];
    let gw = 2.0 * (-z * gg(0, 1) + y * gg(0, 2) + z * gg(1, 0) - x * gg(1, 2) - y * gg(2, 0) + x * gg(2, 1));
    let gx = 2.0
        * (y * gg(0, 1) + z * gg(0, 2) + y * gg(1, 0) - 2.0 * x * gg(1, 1) - w * gg(1, 2) + z * gg(2, 0)
            + w * gg(2, 1)
            - 2.0 * x * gg(2, 2));
    let gy = 2.0
        * (-2.0 * y * gg(0, 0) + x * gg(0, 1) + w * gg(0, 2) + x * gg(1, 0) + z * gg(1, 2) - w * gg(2, 0)
            + z * gg(2, 1)
            - 2.0 * y * gg(2, 2));
    let gz = 2.0
        * (-2.0 * z * gg(0, 0) - w * gg(0, 1) + x * gg(0, 2) + w * gg(1, 0) - 2.0 * z * gg(1, 1)
            + y * gg(1, 2)
            + x * gg(2, 0)
            + y * gg(2, 1));
    let unit = [w, x, y, z];
    let g_unit = [gw, gx, gy, gz];
    let dot: f64 = unit.iter().zip(&g_unit).map(|(u, g)| u * g).sum();
    std::array::from_fn(|i| (g_unit[i] - unit[i] * dot) / n)
}
