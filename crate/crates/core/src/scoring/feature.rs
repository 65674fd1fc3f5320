//! Dense feature correlation between two views.
//!
//! Every spatial feature vector is ℓ2-normalised; the correlation map holds the
//! cosine between every position of one view and every position of the other,
//! and the view score is the mean over the whole map.

use super::ScoringError;
use crate::tensorstore::{Role, TensorBlob};

/// Row-major `n x n` cosine map; entry `(u, v)` pairs position `u` of the
/// first view with position `v` of the second.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub n: usize,
    pub data: Vec<f64>,
}

impl CorrelationMap {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u * self.n + v]
    }
}

/// ℓ2-normalised feature vectors of one view, `positions x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFeatures {
    pub positions: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl NormalizedFeatures {
    pub fn from_blob(blob: &TensorBlob) -> Result<Self, ScoringError> {
        if blob.role != Role::Features || blob.shape.len() != 3 {
            return Err(ScoringError::DimensionMismatch(format!(
                "expected a [H, W, d] features blob, got {} {:?}",
                blob.role, blob.shape
            )));
        }
        let (w, dim) = (blob.shape[1], blob.shape[2]);
        let positions = blob.shape[0] * w;
        let mut data = Vec::with_capacity(positions * dim);
        for (p, v) in blob.data.chunks_exact(dim).enumerate() {
            let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(ScoringError::ZeroNorm {
                    view_id: blob.view_id.clone(),
                    row: p / w,
                    col: p % w,
                });
            }
            data.extend(v.iter().map(|&x| x as f64 / norm));
        }
        Ok(NormalizedFeatures { positions, dim, data })
    }

    pub fn vector(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    /// Mean of the normalised vectors over all positions.
    ///
    /// The mean of a correlation map factorises into the dot product of the
    /// two views' mean vectors, so pairwise scores cost O(d) after this.
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in 0..self.positions {
            m.iter_mut().zip(self.vector(p)).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= self.positions as f64);
        m
    }
}

fn check_pair(a: &NormalizedFeatures, b: &NormalizedFeatures) -> Result<(), ScoringError> {
    if a.positions != b.positions || a.dim != b.dim {
        return Err(ScoringError::DimensionMismatch(format!(
            "feature maps differ: {}x{} vs {}x{}",
            a.positions, a.dim, b.positions, b.dim
        )));
    }
    Ok(())
}

pub fn feature_correlation_map(f_i: &TensorBlob, f_j: &TensorBlob) -> Result<CorrelationMap, ScoringError> {
    if f_i.shape != f_j.shape {
        return Err(ScoringError::DimensionMismatch(format!(
            "feature shapes differ: {:?} vs {:?}",
            f_i.shape, f_j.shape
        )));
    }
    let a = NormalizedFeatures::from_blob(f_i)?;
    let b = NormalizedFeatures::from_blob(f_j)?;
    check_pair(&a, &b)?;
    let n = a.positions;
    let mut data = Vec::with_capacity(n * n);
    for u in 0..n {
        let au = a.vector(u);
        for v in 0..n {
            data.push(au.iter().zip(b.vector(v)).map(|(x, y)| x * y).sum());
        }
    }
    Ok(CorrelationMap { n, data })
}

/// Mean cosine over the full correlation map (divides by `n²`).
pub fn feature_view_score(c: &CorrelationMap) -> f64 {
    c.data.iter().sum::<f64>() / (c.n * c.n) as f64
}

/// Same value as `feature_view_score(feature_correlation_map(..))`, from mean vectors.
pub fn feature_score_from_means(mean_i: &[f64], mean_j: &[f64]) -> f64 {
    mean_i.iter().zip(mean_j).map(|(a, b)| a * b).sum()
}
