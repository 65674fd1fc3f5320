//! Scale-and-shift aligned depth metrics.

use serde::Serialize;

use super::MetricError;
use crate::tensorstore::{Role, TensorBlob};

/// Predicted and ground-truth depth over one image, with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPair {
    pub height: usize,
    pub width: usize,
    pub pred: Vec<f64>,
    pub gt: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthPair {
    pub fn new(
        height: usize,
        width: usize,
        pred: Vec<f64>,
        gt: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self, MetricError> {
        let n = height * width;
        if pred.len() != n || gt.len() != n || valid.len() != n {
            return Err(MetricError::ShapeMismatch(format!(
                "{height}x{width} depth pair with {} / {} / {} entries",
                pred.len(),
                gt.len(),
                valid.len()
            )));
        }
        Ok(DepthPair {
            height,
            width,
            pred,
            gt,
            valid,
        })
    }

    /// Builds a pair from depth blobs; mask entries `> 0.5` are valid.
    pub fn from_blobs(pred: &TensorBlob, gt: &TensorBlob, mask: Option<&TensorBlob>) -> Result<Self, MetricError> {
        for b in [Some(pred), Some(gt), mask].into_iter().flatten() {
            if !matches!(b.role, Role::Depth | Role::DepthMask) || b.shape.len() != 2 {
                return Err(MetricError::ShapeMismatch(format!(
                    "view {}: {} blob with shape {:?} is not a depth map",
                    b.view_id, b.role, b.shape
                )));
            }
        }
        if pred.shape != gt.shape || mask.is_some_and(|m| m.shape != gt.shape) {
            return Err(MetricError::ShapeMismatch(format!(
                "view {}: prediction {:?} vs ground truth {:?}",
                gt.view_id, pred.shape, gt.shape
            )));
        }
        let valid = match mask {
            Some(m) => m.data.iter().map(|&x| x > 0.5).collect(),
            None => vec![true; gt.data.len()],
        };
        DepthPair::new(
            gt.shape[0],
            gt.shape[1],
            pred.data.iter().map(|&x| x as f64).collect(),
            gt.data.iter().map(|&x| x as f64).collect(),
            valid,
        )
    }

    /// Pixels entering the metrics: masked valid, finite, and `gt > 0`.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.gt.len())
            .filter(|&i| self.valid[i] && self.gt[i] > 0.0 && self.gt[i].is_finite() && self.pred[i].is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthAlignment {
    pub scale: f64,
    pub shift: f64,
}

/// Least-squares `(s, b)` minimising `Σ (s·pred + b − gt)²` over active pixels.
pub fn align_depth(pair: &DepthPair) -> Result<DepthAlignment, MetricError> {
    let idx: Vec<usize> = pair.active().collect();
    if idx.len() < 2 {
        return Err(MetricError::TooFewValid(idx.len()));
    }
    let n = idx.len() as f64;
    let mean_p = idx.iter().map(|&i| pair.pred[i]).sum::<f64>() / n;
    let mean_g = idx.iter().map(|&i| pair.gt[i]).sum::<f64>() / n;
    let (mut spp, mut spg) = (0.0, 0.0);
    for &i in &idx {
        let dp = pair.pred[i] - mean_p;
        spp += dp * dp;
        spg += dp * (pair.gt[i] - mean_g);
    }
    if !(spp > 0.0) {
        return Err(MetricError::SingularDepth);
    }
    let scale = spg / spp;
    Ok(DepthAlignment {
        scale,
        shift: mean_g - scale * mean_p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta_125: f64,
    pub n_valid: usize,
    pub alignment: Option<DepthAlignment>,
}

/// AbsRel and δ<1.25 of an already-aligned prediction.
///
/// A non-positive prediction at an active pixel fails δ and still
/// contributes `|p − gt| / gt` to AbsRel.
pub fn depth_metrics_aligned(aligned: &DepthPair) -> Result<DepthMetrics, MetricError> {
    let mut n = 0usize;
    let mut rel = 0.0;
    let mut hits = 0usize;
    for i in aligned.active() {
        let (p, g) = (aligned.pred[i], aligned.gt[i]);
        n += 1;
        rel += (p - g).abs() / g;
        if p > 0.0 && (p / g).max(g / p) < 1.25 {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(MetricError::TooFewValid(0));
    }
    Ok(DepthMetrics {
        abs_rel: rel / n as f64,
        delta_125: hits as f64 / n as f64,
        n_valid: n,
        alignment: None,
    })
}

/// Aligns with [`align_depth`], then evaluates [`depth_metrics_aligned`].
pub fn depth_metrics(pair: &DepthPair) -> Result<DepthMetrics, MetricError> {
    let a = align_depth(pair)?;
    let aligned = DepthPair {
        pred: pair.pred.iter().map(|&p| a.scale * p + a.shift).collect(),
        ..pair.clone()
    };
    let mut m = depth_metrics_aligned(&aligned)?;
    m.alignment = Some(a);
    Ok(m)
}
