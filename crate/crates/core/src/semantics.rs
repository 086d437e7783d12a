//! Language-aligned features: the 64→512 decoder, text embedding banks,
//! classification and open-vocabulary queries.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::FEATURE_DIM;

pub const EMBED_DIM: usize = 512;
pub const DECODER_HIDDEN: usize = 256;
pub const TEMPERATURE: f64 = 0.07;

/// Positions per work item when reducing decoder gradients.
const DECODE_BLOCK: usize = 64;

/// Two-layer MLP `W2 relu(W1 x + b1) + b2` applied per position.
///
/// Parameters are stored flat as `[W1 (hidden×in), b1, W2 (out×hidden), b2]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDecoder {
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    params: Vec<f64>,
}

impl FeatureDecoder {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::invalid("decoder dims", "all dimensions must be positive"));
        }
        let n = hidden * in_dim + hidden + out_dim * hidden + out_dim;
        Ok(Self { in_dim, hidden, out_dim, params: vec![0.0; n] })
    }

    /// He-initialised weights, zero biases.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let mut d = Self::zeros(in_dim, hidden, out_dim)?;
        let s1 = (2.0 / in_dim as f64).sqrt();
        let s2 = (2.0 / hidden as f64).sqrt();
        let (w1, w2) = (d.w1_range(), d.w2_range());
        for v in &mut d.params[w1] {
            *v = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        for v in &mut d.params[w2] {
            *v = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(d)
    }

    pub fn default_dims<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::random(FEATURE_DIM, DECODER_HIDDEN, EMBED_DIM, rng).expect("positive dims")
    }

    pub fn from_params(in_dim: usize, hidden: usize, out_dim: usize, params: Vec<f64>) -> Result<Self> {
        let mut d = Self::zeros(in_dim, hidden, out_dim)?;
        if params.len() != d.params.len() {
            return Err(Error::shape("decoder parameters", d.params.len(), params.len()));
        }
        crate::error::ensure_finite("decoder parameters", &params)?;
        d.params = params;
        Ok(d)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w1_range(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.in_dim
    }

    fn b1_range(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.in_dim;
        s..s + self.hidden
    }

    fn w2_range(&self) -> std::ops::Range<usize> {
        let s = self.b1_range().end;
        s..s + self.out_dim * self.hidden
    }

    fn b2_range(&self) -> std::ops::Range<usize> {
        let s = self.w2_range().end;
        s..s + self.out_dim
    }

    fn check_input(&self, feat: &[f64]) -> Result<usize> {
        if !feat.len().is_multiple_of(self.in_dim) {
            return Err(Error::shape("decoder input channels", self.in_dim, feat.len() % self.in_dim));
        }
        Ok(feat.len() / self.in_dim)
    }

    fn hidden_pre(&self, x: &[f64], out: &mut [f64]) {
        let w1 = &self.params[self.w1_range()];
        let b1 = &self.params[self.b1_range()];
        for (j, o) in out.iter_mut().enumerate() {
            let row = &w1[j * self.in_dim..(j + 1) * self.in_dim];
            *o = b1[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn decode_one(&self, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        self.hidden_pre(x, hidden);
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));
        let w2 = &self.params[self.w2_range()];
        let b2 = &self.params[self.b2_range()];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &w2[k * self.hidden..(k + 1) * self.hidden];
            *o = b2[k] + row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Decode `N × in_dim` features to `N × out_dim`.
    pub fn decode(&self, feat: &[f64]) -> Result<Vec<f64>> {
        let n = self.check_input(feat)?;
        let mut out = vec![0.0; n * self.out_dim];
        out.par_chunks_mut(self.out_dim)
            .zip(feat.par_chunks(self.in_dim))
            .for_each_init(
                || vec![0.0; self.hidden],
                |hidden, (o, x)| self.decode_one(x, hidden, o),
            );
        Ok(out)
    }

    /// Given `∂L/∂output`, return `(∂L/∂input, ∂L/∂params)`.
    pub fn backward(&self, feat: &[f64], grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.check_input(feat)?;
        if grad_out.len() != n * self.out_dim {
            return Err(Error::shape("decoder output gradient", n * self.out_dim, grad_out.len()));
        }
        let mut grad_in = vec![0.0; feat.len()];
        let partials: Vec<Vec<f64>> = grad_in
            .par_chunks_mut(DECODE_BLOCK * self.in_dim)
            .enumerate()
            .map(|(block, gin)| {
                let mut gp = vec![0.0; self.params.len()];
                let mut pre = vec![0.0; self.hidden];
                let mut g_hidden = vec![0.0; self.hidden];
                let start = block * DECODE_BLOCK;
                for (local, gx) in gin.chunks_mut(self.in_dim).enumerate() {
                    let i = start + local;
                    let x = &feat[i * self.in_dim..(i + 1) * self.in_dim];
                    let go = &grad_out[i * self.out_dim..(i + 1) * self.out_dim];
                    self.accumulate(x, go, gx, &mut gp, &mut pre, &mut g_hidden);
                }
                gp
            })
            .collect();
        let mut grad_params = vec![0.0; self.params.len()];
        for p in partials {
            grad_params.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        Ok((grad_in, grad_params))
    }

    fn accumulate(
        &self,
        x: &[f64],
        go: &[f64],
        gx: &mut [f64],
        gp: &mut [f64],
        pre: &mut [f64],
        g_hidden: &mut [f64],
    ) {
        self.hidden_pre(x, pre);
        let w2r = self.w2_range();
        let b2r = self.b2_range();
        let w2 = &self.params[w2r.clone()];
        g_hidden.iter_mut().for_each(|g| *g = 0.0);
        for (k, &g) in go.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gp[b2r.start + k] += g;
            let row = k * self.hidden;
            for j in 0..self.hidden {
                gp[w2r.start + row + j] += g * pre[j].max(0.0);
                g_hidden[j] += g * w2[row + j];
            }
        }
        let w1 = &self.params[self.w1_range()];
        let b1s = self.b1_range().start;
        for j in 0..self.hidden {
            if pre[j] <= 0.0 {
                continue;
            }
            let g = g_hidden[j];
            gp[b1s + j] += g;
            let row = j * self.in_dim;
            for i in 0..self.in_dim {
                gp[row + i] += g * x[i];
                gx[i] += g * w1[row + i];
            }
        }
    }
}

/// Class labels with one unit-norm embedding each.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingBank {
    labels: Vec<String>,
    embeddings: Vec<f64>,
    dim: usize,
    temperature: f64,
}

impl TextEmbeddingBank {
    /// Rows of `embeddings` (`K × dim`) are L2-normalised.
    pub fn new(labels: Vec<String>, mut embeddings: Vec<f64>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("text bank", "needs at least one label"));
        }
        if dim == 0 {
            return Err(Error::invalid("text bank", "embedding dimension must be positive"));
        }
        if embeddings.len() != labels.len() * dim {
            return Err(Error::shape("text bank embeddings", labels.len() * dim, embeddings.len()));
        }
        crate::error::ensure_finite("text bank embeddings", &embeddings)?;
        for (k, row) in embeddings.chunks_mut(dim).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::invalid("text bank", format!("embedding for '{}' is zero", labels[k])));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self { labels, embeddings, dim, temperature: TEMPERATURE })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid("temperature", format!("{temperature} must be positive")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn embedding(&self, k: usize) -> &[f64] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub labels: Vec<usize>,
    /// `N × K`, each row sums to 1.
    pub probabilities: Vec<f64>,
    pub num_classes: usize,
}

/// Softmax over `f · t_k / tau` per position, with the argmax label.
pub fn classify(feat: &[f64], bank: &TextEmbeddingBank) -> Result<Classification> {
    let dim = bank.dim();
    if !feat.len().is_multiple_of(dim) {
        return Err(Error::shape("classify feature channels", dim, feat.len() % dim));
    }
    let k = bank.len();
    let n = feat.len() / dim;
    let mut probabilities = vec![0.0; n * k];
    let mut labels = vec![0usize; n];
    probabilities
        .par_chunks_mut(k)
        .zip(labels.par_iter_mut())
        .zip(feat.par_chunks(dim))
        .for_each(|((p, label), f)| {
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = bank.embedding(j).iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / bank.temperature();
            }
            let mut best = 0;
            for j in 1..k {
                if p[j] > p[best] {
                    best = j;
                }
            }
            *label = best;
            let max = p[best];
            let mut sum = 0.0;
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            p.iter_mut().for_each(|pj| *pj /= sum);
        });
    Ok(Classification { labels, probabilities, num_classes: k })
}

/// Positions whose cosine similarity to `prompt` is at least `threshold`.
/// Zero-norm features have similarity 0.
pub fn query(feat: &[f64], prompt: &[f64], threshold: f64) -> Result<Vec<bool>> {
    let dim = prompt.len();
    if dim == 0 || !feat.len().is_multiple_of(dim) {
        return Err(Error::shape("query feature channels", dim, feat.len() % dim.max(1)));
    }
    let pn = prompt.iter().map(|v| v * v).sum::<f64>().sqrt();
    if pn == 0.0 {
        return Err(Error::invalid("prompt", "embedding has zero norm"));
    }
    Ok(cosine_similarity(feat, prompt)?.into_iter().map(|s| s >= threshold).collect())
}

pub fn cosine_similarity(feat: &[f64], prompt: &[f64]) -> Result<Vec<f64>> {
    let dim = prompt.len();
    if dim == 0 || !feat.len().is_multiple_of(dim) {
        return Err(Error::shape("similarity feature channels", dim, feat.len() % dim.max(1)));
    }
    let pn = prompt.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(feat
        .par_chunks(dim)
        .map(|f| {
            let fn_ = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if fn_ == 0.0 || pn == 0.0 {
                return 0.0;
            }
            f.iter().zip(prompt).map(|(a, b)| a * b).sum::<f64>() / (fn_ * pn)
        })
        .collect())
}
