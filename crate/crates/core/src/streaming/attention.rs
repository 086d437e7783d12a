use rayon::prelude::*;

use crate::error::{Error, Result};

/// Tokens of one frame, `rows × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlock {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenBlock {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("token dim", "must be at least 1"));
        }
        if data.len() != rows * dim {
            return Err(Error::shape("token block", rows * dim, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tokens", "must be finite"));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Split a dense `frames × per_frame × dim` tensor into per-frame blocks.
pub fn blocks_from_dense(frames: usize, per_frame: usize, dim: usize, data: &[f64]) -> Result<Vec<TokenBlock>> {
    if data.len() != frames * per_frame * dim {
        return Err(Error::shape("token tensor", frames * per_frame * dim, data.len()));
    }
    let step = per_frame * dim;
    (0..frames)
        .map(|t| TokenBlock::new(per_frame, dim, data[t * step..(t + 1) * step].to_vec()))
        .collect()
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::invalid("heads", format!("{heads} must divide the token dimension {dim}")));
    }
    Ok(())
}

/// Multi-head scaled dot-product attention of `query` over `context`, with
/// queries, keys and values all equal to the tokens themselves.
///
/// Context blocks are visited oldest first; the accumulation order is fixed,
/// so the same inputs give bitwise identical outputs.
pub fn attend(query: &TokenBlock, context: &[&TokenBlock], heads: usize) -> Result<TokenBlock> {
    let dim = query.dim;
    check_heads(dim, heads)?;
    for c in context {
        if c.dim != dim {
            return Err(Error::shape("context token dim", dim, c.dim));
        }
    }
    let keys: Vec<&[f64]> = context.iter().flat_map(|c| (0..c.rows).map(move |i| c.row(i))).collect();
    if keys.is_empty() {
        return Err(Error::invalid("context", "attention needs at least one key"));
    }
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; query.rows * dim];
    out.par_chunks_mut(dim).enumerate().for_each(|(i, o)| {
        let q = query.row(i);
        let mut scores = vec![0.0; keys.len()];
        for h in 0..heads {
            let span = h * hd..(h + 1) * hd;
            let qh = &q[span.clone()];
            let mut max = f64::NEG_INFINITY;
            for (s, k) in scores.iter_mut().zip(&keys) {
                *s = qh.iter().zip(&k[span.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*s);
            }
            let mut norm = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                norm += *s;
            }
            let oh = &mut o[span.clone()];
            for (s, k) in scores.iter().zip(&keys) {
                let w = s / norm;
                for (x, v) in oh.iter_mut().zip(&k[span.clone()]) {
                    *x += w * v;
                }
            }
        }
    });
    Ok(TokenBlock { rows: query.rows, dim, data: out })
}

/// Attention where every token of frame `t` sees all tokens of frames
/// `t-window+1 ..= t`. `usize::MAX` gives full causal attention.
pub fn windowed_causal_attention(frames: &[TokenBlock], window: usize, heads: usize) -> Result<Vec<TokenBlock>> {
    if window == 0 {
        return Err(Error::invalid("window", "must be at least 1"));
    }
    if let Some(first) = frames.first() {
        check_heads(first.dim, heads)?;
    }
    (0..frames.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            let context: Vec<&TokenBlock> = frames[lo..=t].iter().collect();
            attend(&frames[t], &context, heads)
        })
        .collect()
}
