use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::project::{project_backward, ProjectedGaussian, ScreenGrad};
use super::raster::project_all;
use super::RenderOutput;
use crate::error::{Error, Result};
use crate::motion::OrderGrad;
use crate::scene::{CameraModel, GaussianPrimitive};

/// Pixels per backward work unit. Units are reduced in a fixed order, so the
/// result does not depend on the thread count.
const PIXEL_BLOCK: usize = 256;

/// Loss gradients with respect to the rendered maps. Missing maps count as zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderCotangent {
    pub rgb: Option<Vec<f64>>,
    pub depth: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub feature: Option<Vec<f64>>,
}

/// Per-Gaussian loss gradients, indexed like the rendered set.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub mu: Vec<Vector3<f64>>,
    pub q: Vec<[f64; 4]>,
    pub s: Vec<Vector3<f64>>,
    pub alpha: Vec<f64>,
    pub c: Vec<Vector3<f64>>,
    /// Empty per Gaussian unless features were rendered.
    pub feature: Vec<Vec<f64>>,
    /// Per Gaussian, per order, when the set was warped by a known `dt`.
    pub motion: Option<Vec<Vec<OrderGrad>>>,
}

#[derive(Clone)]
struct Accum {
    screen: ScreenGrad,
    alpha: f64,
    color: Vector3<f64>,
    feature: Vec<f64>,
}

impl Accum {
    fn new(fdim: usize) -> Self {
        Self {
            screen: ScreenGrad::default(),
            alpha: 0.0,
            color: Vector3::zeros(),
            feature: vec![0.0; fdim],
        }
    }

    fn add(&mut self, other: &Accum) {
        self.screen.mean += other.screen.mean;
        for i in 0..3 {
            self.screen.conic[i] += other.screen.conic[i];
        }
        self.screen.depth += other.screen.depth;
        self.alpha += other.alpha;
        self.color += other.color;
        for (a, b) in self.feature.iter_mut().zip(&other.feature) {
            *a += b;
        }
    }
}

fn check_len(name: &str, v: &Option<Vec<f64>>, want: usize) -> Result<()> {
    match v {
        Some(v) if v.len() != want => Err(Error::shape(format!("cotangent {name}"), want, v.len())),
        _ => Ok(()),
    }
}

/// Exact gradients of the compositing in [`super::render`].
///
/// `out` must come from rendering exactly `gaussians` with `camera`. When the
/// set was produced by [`crate::motion::warp_gaussians`] with offset `dt`, pass
/// `warp_dt = Some(dt)` to also get gradients for each order's speed and direction.
pub fn render_backward(
    gaussians: &[GaussianPrimitive],
    camera: &CameraModel,
    out: &RenderOutput,
    cotangent: &RenderCotangent,
    warp_dt: Option<f64>,
) -> Result<RenderGradients> {
    let npix = camera.num_pixels();
    if out.num_gaussians != gaussians.len() {
        return Err(Error::shape("blend records (gaussian count)", out.num_gaussians, gaussians.len()));
    }
    if out.width != camera.width || out.height != camera.height || out.records.num_pixels() != npix {
        return Err(Error::shape(
            "blend records (image size)",
            format!("{}x{}", camera.width, camera.height),
            format!("{}x{}", out.width, out.height),
        ));
    }
    check_len("rgb", &cotangent.rgb, npix * 3)?;
    check_len("depth", &cotangent.depth, npix)?;
    check_len("alpha", &cotangent.alpha, npix)?;
    let fdim = out.feature_dim;
    if cotangent.feature.is_some() {
        if out.feature.is_none() {
            return Err(Error::invalid("cotangent feature", "features were not rendered"));
        }
        check_len("feature", &cotangent.feature, npix * fdim)?;
    }

    let projected = project_all(gaussians, camera);
    let blocks: Vec<Result<Vec<(u32, Accum)>>> = (0..npix.div_ceil(PIXEL_BLOCK))
        .into_par_iter()
        .map(|b| {
            let range = b * PIXEL_BLOCK..((b + 1) * PIXEL_BLOCK).min(npix);
            backward_block(range, gaussians, camera, &projected, out, cotangent)
        })
        .collect();

    let n = gaussians.len();
    let mut acc = vec![Accum::new(if out.feature.is_some() { fdim } else { 0 }); n];
    for block in blocks {
        for (id, a) in block? {
            acc[id as usize].add(&a);
        }
    }

    let geometry: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| match &projected[i] {
            Some(p) => project_backward(&gaussians[i], camera, p, &acc[i].screen),
            None => super::project::GeometryGrad {
                mu: Vector3::zeros(),
                q: [0.0; 4],
                s: Vector3::zeros(),
            },
        })
        .collect();

    let motion = warp_dt.map(|dt| {
        gaussians
            .iter()
            .zip(&geometry)
            .map(|(g, geo)| g.motion.displacement_vjp(dt, &geo.mu))
            .collect()
    });

    let mut grads = RenderGradients {
        mu: Vec::with_capacity(n),
        q: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        feature: Vec::with_capacity(n),
        motion,
    };
    for (a, geo) in acc.into_iter().zip(geometry) {
        grads.mu.push(geo.mu);
        grads.q.push(geo.q);
        grads.s.push(geo.s);
        grads.alpha.push(a.alpha);
        grads.c.push(a.color);
        grads.feature.push(a.feature);
    }
    Ok(grads)
}

fn backward_block(
    range: std::ops::Range<usize>,
    gaussians: &[GaussianPrimitive],
    camera: &CameraModel,
    projected: &[Option<ProjectedGaussian>],
    out: &RenderOutput,
    cot: &RenderCotangent,
) -> Result<Vec<(u32, Accum)>> {
    let width = camera.width as usize;
    let fdim = out.feature_dim;
    let with_features = out.feature.is_some();
    let acc_fdim = if with_features { fdim } else { 0 };
    let mut slots: HashMap<u32, usize> = HashMap::new();
    let mut accums: Vec<(u32, Accum)> = Vec::new();
    let mut transmittance = Vec::new();
    let zero_f = vec![0.0; fdim];

    for pix in range {
        let recs = out.records.pixel(pix);
        if recs.is_empty() {
            continue;
        }
        let g_rgb = cot
            .rgb
            .as_ref()
            .map_or(Vector3::zeros(), |v| Vector3::new(v[pix * 3], v[pix * 3 + 1], v[pix * 3 + 2]));
        let g_alpha_direct = cot.alpha.as_ref().map_or(0.0, |v| v[pix]);
        let g_depth = cot.depth.as_ref().map_or(0.0, |v| v[pix]);
        let g_feat: &[f64] = match &cot.feature {
            Some(f) => &f[pix * fdim..(pix + 1) * fdim],
            None => &zero_f,
        };
        let acc_alpha = out.alpha[pix];
        let (g_alpha, g_num) = if acc_alpha > 0.0 {
            (g_alpha_direct - g_depth * out.depth[pix] / acc_alpha, g_depth / acc_alpha)
        } else {
            (g_alpha_direct, 0.0)
        };

        transmittance.clear();
        let mut t = 1.0;
        for r in recs {
            transmittance.push(t);
            t *= 1.0 - r.opacity;
        }

        let (px, py) = ((pix % width) as f64 + 0.5, (pix / width) as f64 + 0.5);
        let bg = Vector3::from(out.background);
        let mut behind = g_rgb.dot(&bg);
        for (k, r) in recs.iter().enumerate().rev() {
            let id = r.id as usize;
            let g = gaussians
                .get(id)
                .ok_or_else(|| Error::invalid("blend records", format!("gaussian id {id} out of range")))?;
            let p = projected[id]
                .as_ref()
                .ok_or_else(|| Error::invalid("blend records", format!("gaussian {id} is not visible")))?;
            let (falloff, dx, dy) = p.falloff(px, py).ok_or_else(|| {
                Error::invalid("blend records", format!("gaussian {id} does not cover pixel {pix}"))
            })?;
            let a = g.alpha * falloff;
            if (a - r.opacity).abs() > 1e-9 {
                return Err(Error::invalid(
                    "blend records",
                    format!("opacity of gaussian {id} at pixel {pix} changed ({} vs {a})", r.opacity),
                ));
            }

            let mut payload = g_rgb.dot(&g.c) + g_alpha + g_num * p.depth;
            if with_features {
                payload += g_feat.iter().zip(&g.feature).map(|(x, y)| x * y).sum::<f64>();
            }
            let d_opacity = transmittance[k] * (payload - behind);
            behind = a * payload + (1.0 - a) * behind;

            let slot = *slots.entry(r.id).or_insert_with(|| {
                accums.push((r.id, Accum::new(acc_fdim)));
                accums.len() - 1
            });
            let acc = &mut accums[slot].1;
            let w = r.weight;
            acc.color += g_rgb * w;
            acc.screen.depth += g_num * w;
            if with_features {
                for (dst, gf) in acc.feature.iter_mut().zip(g_feat) {
                    *dst += w * gf;
                }
            }
            acc.alpha += d_opacity * falloff;
            let d_power = d_opacity * g.alpha * falloff;
            let [ca, cb, cc] = p.conic;
            acc.screen.mean += Vector2::new(ca * dx + cb * dy, cb * dx + cc * dy) * d_power;
            acc.screen.conic[0] += d_power * (-0.5 * dx * dx);
            acc.screen.conic[1] += d_power * (-dx * dy);
            acc.screen.conic[2] += d_power * (-0.5 * dy * dy);
        }
    }
    Ok(accums)
}
