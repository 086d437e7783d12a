//! Training objectives and their gradients.
//!
//! Every loss returns its value together with the gradient with respect to the
//! prediction it was given, so the optimizer can chain them into
//! [`crate::render::render_backward`].

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::OrderGrad;
use crate::scene::GaussianPrimitive;
use crate::semantics::TextEmbeddingBank;

pub const LAMBDA_LPIPS: f64 = 0.05;
pub const LAMBDA_SKY: f64 = 0.1;
pub const LAMBDA_REG: f64 = 0.005;
pub const LAMBDA_FEAT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn same_len(context: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, a, b));
    }
    Ok(())
}

/// Stand-in for a learned perceptual distance between two RGB images.
pub trait PerceptualFn: Send + Sync {
    fn evaluate(&self, pred: &[f64], gt: &[f64], width: usize, height: usize) -> Result<LossValue>;
}

/// Contributes nothing; the default since LPIPS weights are not shipped.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPerceptual;

impl PerceptualFn for ZeroPerceptual {
    fn evaluate(&self, pred: &[f64], _gt: &[f64], _w: usize, _h: usize) -> Result<LossValue> {
        Ok(LossValue {
            value: 0.0,
            grad: vec![0.0; pred.len()],
        })
    }
}

/// Mean squared difference of smoothed gradient magnitudes over an image pyramid.
#[derive(Debug, Clone, Copy)]
pub struct GradientProxy {
    pub scales: usize,
}

impl Default for GradientProxy {
    fn default() -> Self {
        Self { scales: 3 }
    }
}

const PROXY_EPS: f64 = 1e-6;

struct Img {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

fn pool(img: &Img) -> Img {
    let (w, h) = (img.w / 2, img.h / 2);
    let mut data = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let at = |xx: usize, yy: usize| img.data[(yy * img.w + xx) * 3 + c];
                data[(y * w + x) * 3 + c] =
                    0.25 * (at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1));
            }
        }
    }
    Img { w, h, data }
}

fn unpool(grad: &[f64], w: usize, h: usize, full_w: usize, full_h: usize) -> Vec<f64> {
    let mut out = vec![0.0; full_w * full_h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let g = 0.25 * grad[(y * w + x) * 3 + c];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    out[((2 * y + dy) * full_w + 2 * x + dx) * 3 + c] += g;
                }
            }
        }
    }
    out
}

/// Magnitudes `sqrt(gx² + gy² + eps²)` over the `(w-1) x (h-1)` interior.
fn magnitudes(img: &Img) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::with_capacity((img.w - 1) * (img.h - 1) * 3);
    for y in 0..img.h - 1 {
        for x in 0..img.w - 1 {
            for c in 0..3 {
                let v = img.data[(y * img.w + x) * 3 + c];
                let gx = img.data[(y * img.w + x + 1) * 3 + c] - v;
                let gy = img.data[((y + 1) * img.w + x) * 3 + c] - v;
                out.push(((gx * gx + gy * gy + PROXY_EPS * PROXY_EPS).sqrt(), gx, gy));
            }
        }
    }
    out
}

impl PerceptualFn for GradientProxy {
    fn evaluate(&self, pred: &[f64], gt: &[f64], width: usize, height: usize) -> Result<LossValue> {
        same_len("perceptual", pred.len(), gt.len())?;
        same_len("perceptual image", width * height * 3, pred.len())?;
        let mut p = Img { w: width, h: height, data: pred.to_vec() };
        let mut g = Img { w: width, h: height, data: gt.to_vec() };
        // (pooled dims, grad at that level) for every level used
        let mut levels: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        let mut value = 0.0;
        let mut used = 0usize;
        for level in 0..self.scales.max(1) {
            if level > 0 {
                p = pool(&p);
                g = pool(&g);
            }
            if p.w < 2 || p.h < 2 {
                break;
            }
            let mp = magnitudes(&p);
            let mg = magnitudes(&g);
            let n = mp.len() as f64;
            let mut grad = vec![0.0; p.w * p.h * 3];
            let mut level_value = 0.0;
            let mut i = 0;
            for y in 0..p.h - 1 {
                for x in 0..p.w - 1 {
                    for c in 0..3 {
                        let ((m, gx, gy), (m_gt, _, _)) = (mp[i], mg[i]);
                        i += 1;
                        let diff = m - m_gt;
                        level_value += diff * diff / n;
                        let dm = 2.0 * diff / n;
                        let (dgx, dgy) = (dm * gx / m, dm * gy / m);
                        grad[(y * p.w + x + 1) * 3 + c] += dgx;
                        grad[((y + 1) * p.w + x) * 3 + c] += dgy;
                        grad[(y * p.w + x) * 3 + c] -= dgx + dgy;
                    }
                }
            }
            value += level_value;
            levels.push((p.w, p.h, grad));
            used += 1;
        }
        if used == 0 {
            return Ok(LossValue { value: 0.0, grad: vec![0.0; pred.len()] });
        }
        // walk back down the pyramid, accumulating into the finer level
        let mut carry: Option<Vec<f64>> = None;
        for i in (0..levels.len()).rev() {
            let (w, h, ref grad) = levels[i];
            let mut total = grad.clone();
            if let Some(c) = carry.take() {
                let (cw, ch, _) = levels[i + 1];
                let up = unpool(&c, cw, ch, w, h);
                total.iter_mut().zip(up).for_each(|(a, b)| *a += b);
            }
            carry = Some(total);
        }
        let scale = 1.0 / used as f64;
        Ok(LossValue {
            value: value * scale,
            grad: carry.unwrap().into_iter().map(|v| v * scale).collect(),
        })
    }
}

/// Mean squared error over pixels and channels plus `lambda_lpips` times the perceptual term.
pub fn loss_rgb(
    pred: &[f64],
    gt: &[f64],
    width: usize,
    height: usize,
    perceptual: &dyn PerceptualFn,
    lambda_lpips: f64,
) -> Result<LossValue> {
    same_len("loss_rgb", gt.len(), pred.len())?;
    let n = pred.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p - g;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    value /= n;
    if lambda_lpips != 0.0 {
        let perc = perceptual.evaluate(pred, gt, width, height)?;
        value += lambda_lpips * perc.value;
        grad.iter_mut().zip(perc.grad).for_each(|(a, b)| *a += lambda_lpips * b);
    }
    Ok(LossValue { value, grad })
}

/// Mean absolute depth error over valid pixels. An empty mask gives 0.
pub fn loss_depth(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<LossValue> {
    same_len("loss_depth", gt.len(), pred.len())?;
    same_len("loss_depth mask", pred.len(), valid.len())?;
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        log::warn!("depth loss: validity mask is empty, contributing 0");
        return Ok(LossValue { value: 0.0, grad: vec![0.0; pred.len()] });
    }
    let n = count as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .zip(valid)
        .map(|((p, g), &v)| {
            if !v {
                return 0.0;
            }
            let d = p - g;
            value += d.abs();
            d.signum() * f64::from(d != 0.0) / n
        })
        .collect();
    Ok(LossValue { value: value / n, grad })
}

/// Mean rendered alpha over sky pixels. An empty mask gives 0.
pub fn loss_sky(alpha: &[f64], sky: &[bool]) -> Result<LossValue> {
    same_len("loss_sky mask", alpha.len(), sky.len())?;
    let count = sky.iter().filter(|&&v| v).count();
    if count == 0 {
        return Ok(LossValue { value: 0.0, grad: vec![0.0; alpha.len()] });
    }
    let n = count as f64;
    let value = alpha.iter().zip(sky).filter(|(_, &s)| s).map(|(a, _)| a).sum::<f64>() / n;
    let grad = sky.iter().map(|&s| if s { 1.0 / n } else { 0.0 }).collect();
    Ok(LossValue { value, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionRegLoss {
    pub value: f64,
    /// Per Gaussian, per order, with respect to speed and direction.
    pub grad: Vec<Vec<OrderGrad>>,
}

/// `Σ_l |m_l|²` per Gaussian, averaged over Gaussians.
pub fn loss_reg(gaussians: &[GaussianPrimitive]) -> MotionRegLoss {
    if gaussians.is_empty() {
        return MotionRegLoss { value: 0.0, grad: Vec::new() };
    }
    let n = gaussians.len() as f64;
    let mut value = 0.0;
    let grad = gaussians
        .iter()
        .map(|g| {
            (0..g.motion.orders())
                .map(|l| {
                    let m: &Vector3<f64> = g.motion.coefficient(l);
                    value += m.norm_squared();
                    g.motion.coefficient_vjp(l, &(m * (2.0 / n)))
                })
                .collect()
        })
        .collect();
    MotionRegLoss { value: value / n, grad }
}

/// Mean squared error between decoded and teacher features.
pub fn loss_sem(pred: &[f64], teacher: &[f64]) -> Result<LossValue> {
    same_len("loss_sem", teacher.len(), pred.len())?;
    let n = pred.len().max(1) as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(teacher)
        .map(|(p, t)| {
            let d = p - t;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(LossValue { value: value / n, grad })
}

/// Per-pixel cross-entropy of `softmax_k(f · t_k / tau)` against `labels`, averaged over pixels.
pub fn loss_cls(pred: &[f64], bank: &TextEmbeddingBank, labels: &[usize]) -> Result<LossValue> {
    let dim = bank.dim();
    let k = bank.len();
    same_len("loss_cls", labels.len() * dim, pred.len())?;
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid("label", format!("{bad} not in [0, {k})")));
    }
    let tau = bank.temperature();
    let n = labels.len().max(1) as f64;
    let mut grad = vec![0.0; pred.len()];
    let mut value = 0.0;
    let mut logits = vec![0.0; k];
    for (i, &label) in labels.iter().enumerate() {
        let f = &pred[i * dim..(i + 1) * dim];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = bank.embedding(j).iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / tau;
        }
        let mut top = 0;
        for j in 1..k {
            if logits[j] > logits[top] {
                top = j;
            }
        }
        let max = logits[top];
        let rest: f64 = (0..k).filter(|&j| j != top).map(|j| (logits[j] - max).exp()).sum();
        let log_z = max + rest.ln_1p();
        value += (max - logits[label]) + rest.ln_1p();
        let g = &mut grad[i * dim..(i + 1) * dim];
        for (j, l) in logits.iter().enumerate() {
            let p = (l - log_z).exp();
            let coef = (p - f64::from(j == label)) / (tau * n);
            for (gd, t) in g.iter_mut().zip(bank.embedding(j)) {
                *gd += coef * t;
            }
        }
    }
    Ok(LossValue { value: value / n, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatMode {
    #[default]
    Sem,
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_lpips: f64,
    pub lambda_sky: f64,
    pub lambda_reg: f64,
    pub lambda_feat: f64,
    pub feat_mode: FeatMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lpips: LAMBDA_LPIPS,
            lambda_sky: LAMBDA_SKY,
            lambda_reg: LAMBDA_REG,
            lambda_feat: LAMBDA_FEAT,
            feat_mode: FeatMode::Sem,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_sky", self.lambda_sky),
            ("lambda_reg", self.lambda_reg),
            ("lambda_feat", self.lambda_feat),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("{v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms for one rendered frame. `None` means the supervision was absent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    /// Already includes the weighted perceptual term.
    pub rgb: f64,
    pub depth: Option<f64>,
    pub sky: Option<f64>,
    pub reg: f64,
    pub sem: Option<f64>,
    pub cls: Option<f64>,
}

/// `∂L_total/∂component`; zero for absent components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentScales {
    pub rgb: f64,
    pub depth: f64,
    pub sky: f64,
    pub reg: f64,
    pub sem: f64,
    pub cls: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLoss {
    pub value: f64,
    pub scales: ComponentScales,
}

/// `L_rgb + L_depth + λ_sky L_sky + λ_reg L_reg + λ_feat L_feat`, with `L_feat` picked by `feat_mode`.
pub fn loss_total(c: &LossComponents, w: &LossWeights) -> TotalLoss {
    let present = |o: Option<f64>| if o.is_some() { 1.0 } else { 0.0 };
    let (sem_scale, cls_scale) = match w.feat_mode {
        FeatMode::Sem => (w.lambda_feat * present(c.sem), 0.0),
        FeatMode::Cls => (0.0, w.lambda_feat * present(c.cls)),
    };
    let scales = ComponentScales {
        rgb: 1.0,
        depth: present(c.depth),
        sky: w.lambda_sky * present(c.sky),
        reg: w.lambda_reg,
        sem: sem_scale,
        cls: cls_scale,
    };
    let value = c.rgb * scales.rgb
        + c.depth.unwrap_or(0.0) * scales.depth
        + c.sky.unwrap_or(0.0) * scales.sky
        + c.reg * scales.reg
        + c.sem.unwrap_or(0.0) * scales.sem
        + c.cls.unwrap_or(0.0) * scales.cls;
    TotalLoss { value, scales }
}
