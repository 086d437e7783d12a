//! Scene-flow, photometric, depth and segmentation metrics.
//!
//! Reductions run over fixed-size chunks summed in order, so results do not
//! depend on the thread count.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Flows shorter than this have no defined direction.
pub const ANGLE_EPS: f64 = 1e-8;

const CHUNK: usize = 1024;

fn ordered_sum<T: Sync>(items: &[T], f: impl Fn(&T) -> f64 + Sync) -> f64 {
    items
        .par_chunks(CHUNK)
        .map(|c| c.iter().map(&f).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

fn same_len(context: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, a, b));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowEvalResult {
    #[serde(rename = "EPE3D")]
    pub epe3d: f64,
    /// Percent of points with error under 0.05 m or 5 %.
    #[serde(rename = "Acc5")]
    pub acc5: f64,
    /// Percent of points with error under 0.1 m or 10 %.
    #[serde(rename = "Acc10")]
    pub acc10: f64,
    /// Mean angle in radians over points where both flows are non-degenerate; 0 if there are none.
    #[serde(rename = "theta_err")]
    pub theta_err: f64,
    pub points: usize,
    pub theta_excluded: usize,
}

fn within(err: f64, gt_norm: f64, abs: f64, rel: f64) -> bool {
    err < abs || (gt_norm > 0.0 && err / gt_norm < rel)
}

pub fn eval_flow(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<FlowEvalResult> {
    same_len("eval_flow", gt.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("eval_flow", "needs at least one point"));
    }
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = pred.iter().copied().zip(gt.iter().copied()).collect();
    let n = pairs.len() as f64;
    let epe = ordered_sum(&pairs, |(p, g)| (p - g).norm()) / n;
    let acc5 = ordered_sum(&pairs, |(p, g)| f64::from(within((p - g).norm(), g.norm(), 0.05, 0.05))) / n;
    let acc10 = ordered_sum(&pairs, |(p, g)| f64::from(within((p - g).norm(), g.norm(), 0.1, 0.1))) / n;
    let valid = |p: &Vector3<f64>, g: &Vector3<f64>| p.norm() >= ANGLE_EPS && g.norm() >= ANGLE_EPS;
    let counted = pairs.iter().filter(|(p, g)| valid(p, g)).count();
    let theta_sum = ordered_sum(&pairs, |(p, g)| {
        if valid(p, g) {
            p.cross(g).norm().atan2(p.dot(g))
        } else {
            0.0
        }
    });
    Ok(FlowEvalResult {
        epe3d: epe,
        acc5: 100.0 * acc5,
        acc10: 100.0 * acc10,
        theta_err: if counted > 0 { theta_sum / counted as f64 } else { 0.0 },
        points: pairs.len(),
        theta_excluded: pairs.len() - counted,
    })
}

pub fn mse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len("mse", gt.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("mse", "empty input"));
    }
    let pairs: Vec<(f64, f64)> = pred.iter().copied().zip(gt.iter().copied()).collect();
    Ok(ordered_sum(&pairs, |(p, g)| (p - g) * (p - g)) / pairs.len() as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, reported as 99 dB when MSE < 1e-10.
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(-10.0 * m.log10())
}

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter over the valid region of one channel.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and all fully-contained 11×11 windows.
pub fn ssim(pred: &[f64], gt: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    same_len("ssim", gt.len(), pred.len())?;
    same_len("ssim image", width * height * channels, pred.len())?;
    if width < SSIM_WINDOW || height < SSIM_WINDOW || channels == 0 {
        return Err(Error::invalid(
            "ssim",
            format!("{width}x{height} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let k = ssim_kernel();
    let per_channel: Vec<f64> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let plane = |img: &[f64]| -> Vec<f64> { img.iter().skip(c).step_by(channels).copied().collect() };
            let x = plane(pred);
            let y = plane(gt);
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
            let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, width, height, &k));
            let mut total = 0.0;
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
            }
            total / mx.len() as f64
        })
        .collect();
    Ok(per_channel.iter().sum::<f64>() / channels as f64)
}

/// Root mean squared depth error over `mask`.
pub fn depth_rmse(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    same_len("depth_rmse", gt.len(), pred.len())?;
    same_len("depth_rmse mask", pred.len(), mask.len())?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::invalid("depth_rmse", "mask selects no pixels"));
    }
    let items: Vec<(f64, f64, bool)> = (0..pred.len()).map(|i| (pred[i], gt[i], mask[i])).collect();
    let sum = ordered_sum(&items, |&(p, g, m)| if m { (p - g) * (p - g) } else { 0.0 });
    Ok((sum / count as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEvalResult {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "Acc")]
    pub accuracy: f64,
    /// `confusion[gt][pred]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
}

pub fn eval_seg(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<SegEvalResult> {
    same_len("eval_seg", gt.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("eval_seg", "no pixels"));
    }
    if num_classes == 0 {
        return Err(Error::invalid("eval_seg", "needs at least one class"));
    }
    if let Some(bad) = pred.iter().chain(gt).find(|&&l| l >= num_classes) {
        return Err(Error::invalid("label", format!("{bad} not in [0, {num_classes})")));
    }
    let k = num_classes;
    let confusion_flat = pred
        .par_chunks(CHUNK)
        .zip(gt.par_chunks(CHUNK))
        .map(|(p, g)| {
            let mut m = vec![0u64; k * k];
            for (&pi, &gi) in p.iter().zip(g) {
                m[gi * k + pi] += 1;
            }
            m
        })
        .reduce(
            || vec![0u64; k * k],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let confusion: Vec<Vec<u64>> = confusion_flat.chunks(k).map(|r| r.to_vec()).collect();
    let per_class_iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..k).map(|r| confusion[r][c]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    Ok(SegEvalResult {
        per_class_iou,
        miou,
        accuracy: correct as f64 / pred.len() as f64,
        confusion,
    })
}
