//! Gaussian and camera data model, raw-parameter activations and ray geometry.
//!
//! Everything downstream (motion, rendering, losses, streaming) works on
//! [`GaussianPrimitive`] values in activated space: world-space meters for
//! positions and scales, probabilities for opacity and color.

use nalgebra::{Matrix3, Vector3};

use crate::error::{ensure_finite, Error, Result};
use crate::motion::MotionCoefficients;

/// Channels of the per-Gaussian semantic feature.
pub const FEATURE_DIM: usize = 64;
/// Taylor orders predicted per Gaussian (velocity, acceleration, jerk).
pub const MOTION_ORDERS: usize = 3;
/// Raw motion layout: one speed plus a 3-vector direction per order.
pub const MOTION_RAW_DIM: usize = MOTION_ORDERS * 4;

/// `log(0.5)`, so that a zero raw scale starts at the maximum size.
pub const SCALE_OFFSET: f64 = -0.693;
pub const MAX_SCALE: f64 = 0.5;
/// Underflow guard; `exp` of very negative raw scales would otherwise reach 0.
pub const MIN_SCALE: f64 = 1e-12;
pub const OPACITY_OFFSET: f64 = 2.0;
pub const DEFAULT_NEAR: f64 = 0.2;
pub const DEFAULT_FAR: f64 = 400.0;

const MIN_QUAT_NORM: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Decoder-head output for one pixel-aligned Gaussian, before activation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGaussianParams {
    pub depth_raw: f64,
    pub rot_raw: [f64; 4],
    pub scale_raw: [f64; 3],
    pub opacity_raw: f64,
    pub color_raw: [f64; 3],
    pub motion_raw: [f64; MOTION_RAW_DIM],
    pub feature: Vec<f64>,
}

impl Default for RawGaussianParams {
    fn default() -> Self {
        Self {
            depth_raw: 0.0,
            rot_raw: [1.0, 0.0, 0.0, 0.0],
            scale_raw: [0.0; 3],
            opacity_raw: 0.0,
            color_raw: [0.0; 3],
            motion_raw: [0.0; MOTION_RAW_DIM],
            feature: vec![0.0; FEATURE_DIM],
        }
    }
}

/// One anisotropic 3D Gaussian with Taylor motion.
///
/// `q` is stored as `(w, x, y, z)` and kept unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: Vector3<f64>,
    pub q: [f64; 4],
    pub s: Vector3<f64>,
    pub alpha: f64,
    pub c: Vector3<f64>,
    pub feature: Vec<f64>,
    pub motion: MotionCoefficients,
}

impl GaussianPrimitive {
    /// A static, identity-rotated Gaussian with zero features.
    pub fn new(mu: Vector3<f64>, s: Vector3<f64>, alpha: f64, c: Vector3<f64>) -> Self {
        Self {
            mu,
            q: [1.0, 0.0, 0.0, 0.0],
            s,
            alpha,
            c,
            feature: vec![0.0; FEATURE_DIM],
            motion: MotionCoefficients::zeros(MOTION_ORDERS),
        }
    }

    pub fn with_motion(mut self, motion: MotionCoefficients) -> Self {
        self.motion = motion;
        self
    }

    pub fn with_feature(mut self, feature: Vec<f64>) -> Self {
        self.feature = feature;
        self
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rotation(&self.q)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("mu", self.mu.as_slice())?;
        ensure_finite("q", &self.q)?;
        ensure_finite("s", self.s.as_slice())?;
        ensure_finite("alpha", &[self.alpha])?;
        ensure_finite("c", self.c.as_slice())?;
        ensure_finite("feature", &self.feature)?;
        let qn = self.q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("q", format!("norm {qn} is not 1")));
        }
        if self.s.iter().any(|&v| v <= 0.0 || v > MAX_SCALE) {
            return Err(Error::invalid("s", format!("{:?} outside (0, 0.5]", self.s)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", format!("{} outside [0, 1]", self.alpha)));
        }
        if self.c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("c", format!("{:?} outside [0, 1]", self.c)));
        }
        if self.feature.len() != FEATURE_DIM {
            return Err(Error::shape("feature", FEATURE_DIM, self.feature.len()));
        }
        Ok(())
    }
}

/// Rotation matrix of `q / |q|`, with `q = (w, x, y, z)`.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn normalize_quat(q: &[f64; 4]) -> Result<[f64; 4]> {
    ensure_finite("rot_raw", q)?;
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < MIN_QUAT_NORM {
        return Err(Error::invalid(
            "rot_raw",
            format!("quaternion norm {n:e} is too small to normalize"),
        ));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Pinhole camera. `rotation`/`translation` map world points into the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn pinhole(width: u32, height: u32, focal: f64) -> Self {
        let k = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self {
            intrinsics: k,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    pub fn with_pose(mut self, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        self.rotation = rotation;
        self.translation = translation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        ensure_finite("intrinsics", k.as_slice())?;
        ensure_finite("rotation", self.rotation.as_slice())?;
        ensure_finite("translation", self.translation.as_slice())?;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::invalid(
                "intrinsics",
                "must be upper-triangular with K[2][2] = 1",
            ));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::invalid("intrinsics", "focal entries must be positive"));
        }
        let dev = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if dev > 1e-6 || self.rotation.determinant() < 0.0 {
            return Err(Error::invalid(
                "rotation",
                format!("not a proper orthonormal matrix (deviation {dev:e})"),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size", "width and height must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("near/far", "need 0 < near < far"));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Continuous image coordinates `(u, v)` and camera depth of a world point.
    /// Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let pc = self.world_to_camera(p);
        let h = self.intrinsics * pc;
        (h.x / h.z, h.y / h.z, pc.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, dir: Vector3<f64>) -> Result<Self> {
        ensure_finite("ray origin", origin.as_slice())?;
        ensure_finite("ray direction", dir.as_slice())?;
        let n = dir.norm();
        if n < 1e-12 {
            return Err(Error::invalid("ray direction", "zero length"));
        }
        Ok(Self {
            origin,
            dir: dir / n,
        })
    }

    /// `mu = o + d r`.
    pub fn at(&self, distance: f64) -> Vector3<f64> {
        self.origin + self.dir * distance
    }
}

/// Ray through the center of pixel `(col, row)`.
pub fn pixel_ray(camera: &CameraModel, col: u32, row: u32) -> Result<Ray> {
    if col >= camera.width || row >= camera.height {
        return Err(Error::invalid(
            "pixel",
            format!(
                "({col}, {row}) outside {}x{} image",
                camera.width, camera.height
            ),
        ));
    }
    let k_inv = camera
        .intrinsics
        .try_inverse()
        .ok_or_else(|| Error::invalid("intrinsics", "singular"))?;
    let d_cam = k_inv * Vector3::new(col as f64 + 0.5, row as f64 + 0.5, 1.0);
    let d_world = camera.rotation.transpose() * d_cam;
    Ray::new(camera.center(), d_world)
}

/// 6D Plücker coordinates `(r, o x r)` of a ray.
pub fn plucker_encode(ray: &Ray) -> [f64; 6] {
    let r = ray.dir;
    let m = ray.origin.cross(&r);
    [r.x, r.y, r.z, m.x, m.y, m.z]
}

pub fn activate_scale(x: f64) -> f64 {
    (x + SCALE_OFFSET).exp().clamp(MIN_SCALE, MAX_SCALE)
}

pub fn activate_opacity(x: f64) -> f64 {
    sigmoid(x - OPACITY_OFFSET)
}

/// Ray distance in `(near, far)`, strictly inside even where the sigmoid saturates.
pub fn activate_depth(x: f64, near: f64, far: f64) -> f64 {
    (near + sigmoid(x) * (far - near)).clamp(near.next_up(), far.next_down())
}

/// Map decoder-head outputs along a pixel ray into an activated Gaussian.
pub fn activate(raw: &RawGaussianParams, ray: &Ray, camera: &CameraModel) -> Result<GaussianPrimitive> {
    ensure_finite("depth_raw", &[raw.depth_raw])?;
    ensure_finite("scale_raw", &raw.scale_raw)?;
    ensure_finite("opacity_raw", &[raw.opacity_raw])?;
    ensure_finite("color_raw", &raw.color_raw)?;
    ensure_finite("motion_raw", &raw.motion_raw)?;
    ensure_finite("feature", &raw.feature)?;
    if raw.feature.len() != FEATURE_DIM {
        return Err(Error::shape("feature", FEATURE_DIM, raw.feature.len()));
    }
    if ((ray.dir.norm()) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("ray direction", "not unit length"));
    }
    let q = normalize_quat(&raw.rot_raw)?;
    let d = activate_depth(raw.depth_raw, camera.near, camera.far);
    let s = Vector3::from_iterator(raw.scale_raw.iter().map(|&x| activate_scale(x)));
    let c = Vector3::from_iterator(raw.color_raw.iter().map(|&x| sigmoid(x)));
    Ok(GaussianPrimitive {
        mu: ray.at(d),
        q,
        s,
        alpha: activate_opacity(raw.opacity_raw),
        c,
        feature: raw.feature.clone(),
        motion: MotionCoefficients::from_raw(&raw.motion_raw)?,
    })
}
