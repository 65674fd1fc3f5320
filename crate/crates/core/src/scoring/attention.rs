//! Cross-view attention scores from query/key projections.
//!
//! The anchor's patch-token queries attend over every token of every view.
//! Softmax rows are averaged over heads and query tokens into one weight per
//! key token, then each view's patch-token slice is reduced to a scalar.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ScoringError;
use crate::tensorstore::TokenGrid;

/// How per-view attention maps are reduced to scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Mean attention weight over the view's patch tokens.
    #[serde(alias = "raw")]
    RawMean,
    /// Patch maps of all views are min-max rescaled jointly, then averaged.
    #[default]
    #[serde(alias = "minmax")]
    MinmaxNormalized,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::RawMean => "raw_mean",
            AttentionMode::MinmaxNormalized => "minmax_normalized",
        }
    }
}

/// A borrowed `[heads, tokens, dim]` block of query or key projections.
#[derive(Debug, Clone, Copy)]
pub struct QkBlock<'a> {
    pub heads: usize,
    pub tokens: usize,
    pub dim: usize,
    pub data: &'a [f32],
}

impl<'a> QkBlock<'a> {
    pub fn new(heads: usize, tokens: usize, dim: usize, data: &'a [f32]) -> Result<Self, ScoringError> {
        if data.len() != heads * tokens * dim {
            return Err(ScoringError::DimensionMismatch(format!(
                "block [{heads}, {tokens}, {dim}] needs {} scalars, got {}",
                heads * tokens * dim,
                data.len()
            )));
        }
        Ok(QkBlock {
            heads,
            tokens,
            dim,
            data,
        })
    }

    /// Token `t` of head `h`.
    #[inline]
    fn vector(&self, h: usize, t: usize) -> &'a [f32] {
        let start = (h * self.tokens + t) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Softmax attention probabilities, `[heads, n_query, n_keys]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRows {
    pub heads: usize,
    pub n_query: usize,
    pub n_keys: usize,
    pub data: Vec<f32>,
}

impl AttentionRows {
    pub fn new(heads: usize, n_query: usize, n_keys: usize, data: Vec<f32>) -> Result<Self, ScoringError> {
        if data.len() != heads * n_query * n_keys {
            return Err(ScoringError::DimensionMismatch(format!(
                "attention rows [{heads}, {n_query}, {n_keys}] need {} scalars, got {}",
                heads * n_query * n_keys,
                data.len()
            )));
        }
        Ok(AttentionRows {
            heads,
            n_query,
            n_keys,
            data,
        })
    }

    pub fn row(&self, head: usize, query: usize) -> &[f32] {
        let start = (head * self.n_query + query) * self.n_keys;
        &self.data[start..start + self.n_keys]
    }

    /// Average over heads, then over query tokens.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.n_keys];
        for h in 0..self.heads {
            for q in 0..self.n_query {
                for (a, &p) in acc.iter_mut().zip(self.row(h, q)) {
                    *a += p as f64;
                }
            }
        }
        let n = (self.heads * self.n_query) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

fn check_compatible(q: &QkBlock, keys: &[QkBlock]) -> Result<usize, ScoringError> {
    if keys.is_empty() {
        return Err(ScoringError::DimensionMismatch("no key blocks".into()));
    }
    for k in keys {
        if k.dim != q.dim {
            return Err(ScoringError::DimensionMismatch(format!(
                "query d_head {} != key d_head {}",
                q.dim, k.dim
            )));
        }
        if k.heads != q.heads {
            return Err(ScoringError::DimensionMismatch(format!(
                "query heads {} != key heads {}",
                q.heads, k.heads
            )));
        }
    }
    Ok(keys.iter().map(|k| k.tokens).sum())
}

/// Writes one softmax row (`head`, `query`) over all key blocks into `out`.
fn softmax_row(q: &QkBlock, keys: &[QkBlock], head: usize, query: usize, scale: f64, out: &mut [f64]) {
    let qv = q.vector(head, query);
    let mut t = 0;
    for k in keys {
        for kt in 0..k.tokens {
            let kv = k.vector(head, kt);
            let dot: f64 = qv.iter().zip(kv).map(|(&a, &b)| a as f64 * b as f64).sum();
            out[t] = dot * scale;
            t += 1;
        }
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    out.iter_mut().for_each(|v| *v /= sum);
}

/// Full attention rows `softmax(q kᵀ / sqrt(d_head))` with the key blocks
/// concatenated in order.
pub fn attention_matrix_from_qk(q: &QkBlock, keys: &[QkBlock]) -> Result<AttentionRows, ScoringError> {
    let n_keys = check_compatible(q, keys)?;
    let scale = 1.0 / (q.dim as f64).sqrt();
    let mut data = vec![0.0f32; q.heads * q.tokens * n_keys];
    data.par_chunks_mut(n_keys).enumerate().for_each_init(
        || vec![0.0f64; n_keys],
        |buf, (r, out)| {
            softmax_row(q, keys, r / q.tokens, r % q.tokens, scale, buf);
            for (o, &p) in out.iter_mut().zip(buf.iter()) {
                *o = p as f32;
            }
        },
    );
    AttentionRows::new(q.heads, q.tokens, n_keys, data)
}

/// Rows processed per work item; fixed so the summation order does not
/// depend on the thread count.
const ROWS_PER_CHUNK: usize = 8;
const CHUNKS_PER_BATCH: usize = 64;

/// Head- and query-averaged attention over all key tokens, without
/// materialising the full `[heads, n_query, n_keys]` tensor.
pub fn mean_attention_from_qk(q: &QkBlock, keys: &[QkBlock]) -> Result<Vec<f64>, ScoringError> {
    let n_keys = check_compatible(q, keys)?;
    let scale = 1.0 / (q.dim as f64).sqrt();
    let n_rows = q.heads * q.tokens;
    let n_chunks = n_rows.div_ceil(ROWS_PER_CHUNK);

    let mut acc = vec![0.0f64; n_keys];
    for batch_start in (0..n_chunks).step_by(CHUNKS_PER_BATCH) {
        let batch_end = (batch_start + CHUNKS_PER_BATCH).min(n_chunks);
        let partials: Vec<Vec<f64>> = (batch_start..batch_end)
            .into_par_iter()
            .map(|c| {
                let mut part = vec![0.0f64; n_keys];
                let mut buf = vec![0.0f64; n_keys];
                let rows = c * ROWS_PER_CHUNK..((c + 1) * ROWS_PER_CHUNK).min(n_rows);
                for r in rows {
                    softmax_row(q, keys, r / q.tokens, r % q.tokens, scale, &mut buf);
                    part.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                }
                part
            })
            .collect();
        for part in partials {
            acc.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
    }
    let n = n_rows as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Per-view attention scores for one anchor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionScores {
    pub anchor: String,
    pub view_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub mode: AttentionMode,
    pub layer: Option<u32>,
}

/// Reduces a head/query-averaged attention row to one score per view.
///
/// `mean_row` covers `view_ids.len() * tokens_per_image` key tokens in view
/// order; only each view's patch tokens are used.
pub fn attention_view_scores(
    mean_row: &[f64],
    grid: &TokenGrid,
    view_ids: &[String],
    anchor: &str,
    mode: AttentionMode,
    layer: Option<u32>,
) -> Result<AttentionScores, ScoringError> {
    let expected = view_ids.len() * grid.tokens_per_image;
    if mean_row.len() != expected {
        return Err(ScoringError::TokenCountMismatch {
            expected,
            actual: mean_row.len(),
        });
    }
    let hw = grid.num_patches();
    let maps: Vec<&[f64]> = (0..view_ids.len())
        .map(|j| {
            let start = j * grid.tokens_per_image + grid.patch_start_idx;
            &mean_row[start..start + hw]
        })
        .collect();

    let mean = |m: &[f64]| m.iter().sum::<f64>() / hw as f64;
    let scores = match mode {
        AttentionMode::RawMean => maps.iter().map(|m| mean(m)).collect(),
        AttentionMode::MinmaxNormalized => {
            let (lo, hi) = maps
                .iter()
                .flat_map(|m| m.iter())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                });
            let range = hi - lo;
            if !(range > 0.0) {
                return Err(ScoringError::DegenerateAttention);
            }
            maps.iter()
                .map(|m| m.iter().map(|&x| (x - lo) / range).sum::<f64>() / hw as f64)
                .collect()
        }
    };
    Ok(AttentionScores {
        anchor: anchor.to_string(),
        view_ids: view_ids.to_vec(),
        scores,
        mode,
        layer,
    })
}
