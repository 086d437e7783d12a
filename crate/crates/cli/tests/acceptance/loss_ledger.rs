use splat4d::losses::{
    loss_rgb, loss_total, FeatMode, LossComponents, LossValue, LossWeights, PerceptualFn, LAMBDA_FEAT,
    LAMBDA_LPIPS, LAMBDA_REG, LAMBDA_SKY,
};
use splat4d::semantics::{TextEmbeddingBank, TEMPERATURE};

use crate::ensure;

const TOL: f64 = 1e-12;

/// A perceptual term with a fixed value.
struct Constant(f64);

impl PerceptualFn for Constant {
    fn evaluate(&self, pred: &[f64], _gt: &[f64], _w: usize, _h: usize) -> splat4d::Result<LossValue> {
        Ok(LossValue { value: self.0, grad: vec![0.0; pred.len()] })
    }
}

pub fn run() -> Result<String, String> {
    for (name, got, want) in [
        ("lambda_lpips", LAMBDA_LPIPS, 0.05),
        ("lambda_sky", LAMBDA_SKY, 0.1),
        ("lambda_reg", LAMBDA_REG, 0.005),
        ("lambda_feat", LAMBDA_FEAT, 1.0),
        ("tau", TEMPERATURE, 0.07),
    ] {
        ensure(got == want, || format!("{name} is {got}, expected {want}"))?;
    }
    let w = LossWeights::default();
    ensure(
        (w.lambda_lpips, w.lambda_sky, w.lambda_reg, w.lambda_feat) == (0.05, 0.1, 0.005, 1.0),
        || format!("default weights {w:?}"),
    )?;
    let bank = TextEmbeddingBank::new(vec!["a".into()], vec![1.0, 0.0], 2).map_err(|e| e.to_string())?;
    ensure(bank.temperature() == 0.07, || format!("bank temperature {}", bank.temperature()))?;

    // Squared differences 0.0625, 0, 0.25, 0, 0, 0.25 over 6 values, plus 0.05 * 2.
    let pred = [0.5, 0.5, 0.5, 1.0, 0.0, 0.0];
    let gt = [0.25, 0.5, 1.0, 1.0, 0.0, 0.5];
    let rgb = loss_rgb(&pred, &gt, 2, 1, &Constant(2.0), w.lambda_lpips).map_err(|e| e.to_string())?.value;
    ensure((rgb - 0.19375).abs() <= TOL, || format!("L_rgb {rgb}, expected 0.19375"))?;

    let full = LossComponents { rgb: 0.8, depth: Some(0.3), sky: Some(0.2), reg: 1.5, sem: Some(0.4), cls: Some(0.9) };
    let cls = LossWeights { feat_mode: FeatMode::Cls, ..w };
    let cases = [
        ("all terms, L_sem", full, w, 1.5275),
        ("all terms, L_cls", full, cls, 2.0275),
        ("no depth or sky", LossComponents { depth: None, sky: None, ..full }, w, 1.2075),
        ("L_sem selected but absent", LossComponents { sem: None, ..full }, w, 1.1275),
        ("L_cls selected but absent", LossComponents { cls: None, ..full }, cls, 1.1275),
        ("rgb only", LossComponents { rgb: 0.8, ..Default::default() }, w, 0.8),
        ("measured rgb", LossComponents { rgb, depth: Some(0.7), sky: Some(0.5), reg: 2.0, sem: Some(0.25), cls: None }, w, 1.20375),
    ];
    for (name, c, weights, want) in cases {
        let got = loss_total(&c, &weights).value;
        ensure((got - want).abs() <= TOL, || format!("{name}: {got}, expected {want}"))?;
    }
    let s = loss_total(&full, &w).scales;
    ensure(
        (s.rgb, s.depth, s.sky, s.reg, s.sem, s.cls) == (1.0, 1.0, 0.1, 0.005, 1.0, 0.0),
        || format!("scales {s:?}"),
    )?;
    Ok(format!("weights (0.05, 0.1, 0.005, 1.0, tau 0.07) and {} weighted sums match to {TOL:e}", cases.len() + 1))
}
