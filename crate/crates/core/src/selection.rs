//! Threshold selection of context views.
//!
//! For an anchor `i` the kept set is `{i} ∪ {j : score(i→j) >= τ}`, in
//! manifest order. The fused variant blends min-max normalised attention and
//! feature scores with weight `alpha` before thresholding.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::scoring::{Probe, ScoreMatrix, ScoreRow};
use crate::tensorstore::{Label, ViewManifest};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectionError {
    #[error("anchor {0:?} is not in the score row")]
    AnchorMissing(String),
    #[error("score row is constant ({0}); min-max normalisation is undefined")]
    Degenerate(f64),
    #[error("fewer than two scores to normalise")]
    TooFewScores,
    #[error("score rows index different views")]
    IndexMismatch,
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("no selections to combine")]
    Empty,
}

/// Weighting of the fused probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alpha: f64,
    pub tau_agg: f64,
}

impl FusionConfig {
    pub const DEFAULT_ALPHA: f64 = 0.5;
    pub const DEFAULT_TAU_AGG: f64 = 0.4;

    pub fn new(alpha: f64, tau_agg: f64) -> Result<Self, SelectionError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(SelectionError::InvalidAlpha(alpha));
        }
        Ok(FusionConfig { alpha, tau_agg })
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: Self::DEFAULT_ALPHA,
            tau_agg: Self::DEFAULT_TAU_AGG,
        }
    }
}

/// Default thresholds per probe. Attention thresholds apply to min-max
/// normalised attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub attention: f64,
    pub feature: f64,
    pub fused: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            attention: 0.05,
            feature: 0.65,
            fused: FusionConfig::DEFAULT_TAU_AGG,
        }
    }
}

impl Thresholds {
    pub fn for_probe(&self, probe: Probe) -> f64 {
        match probe {
            Probe::Attention => self.attention,
            Probe::Feature => self.feature,
            Probe::Fused => self.fused,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Anchor,
    Kept,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewVerdict {
    pub view_id: String,
    pub score: f64,
    pub verdict: Verdict,
}

/// The kept-view set for one anchor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub anchor: String,
    pub kept: Vec<String>,
    pub threshold: f64,
    pub probe: Probe,
    pub per_view: Vec<ViewVerdict>,
}

impl Selection {
    pub fn is_kept(&self, view_id: &str) -> bool {
        self.kept.iter().any(|k| k == view_id)
    }
}

/// Applies the threshold rule to the row's anchor. Ties (`score == tau`) are kept;
/// NaN scores are rejected.
pub fn select_views(row: &ScoreRow, tau: f64, probe: Probe) -> Result<Selection, SelectionError> {
    if row.anchor_index().is_none() {
        return Err(SelectionError::AnchorMissing(row.anchor.clone()));
    }
    let mut kept = Vec::new();
    let mut per_view = Vec::with_capacity(row.view_ids.len());
    for (id, &score) in row.view_ids.iter().zip(&row.scores) {
        let verdict = if *id == row.anchor {
            Verdict::Anchor
        } else if score >= tau {
            Verdict::Kept
        } else {
            Verdict::Rejected
        };
        if verdict != Verdict::Rejected {
            kept.push(id.clone());
        }
        per_view.push(ViewVerdict {
            view_id: id.clone(),
            score,
            verdict,
        });
    }
    Ok(Selection {
        anchor: row.anchor.clone(),
        kept,
        threshold: tau,
        probe,
        per_view,
    })
}

/// Min-max rescales scores to `[0, 1]`.
pub fn normalize_for_fusion(scores: &[f64]) -> Result<Vec<f64>, SelectionError> {
    if scores.len() < 2 {
        return Err(SelectionError::TooFewScores);
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(SelectionError::Degenerate(lo));
    }
    Ok(scores.iter().map(|&s| (s - lo) / range).collect())
}

/// `alpha * att + (1 - alpha) * feat`, elementwise.
pub fn fuse_scores(att: &ScoreRow, feat: &ScoreRow, cfg: &FusionConfig) -> Result<ScoreRow, SelectionError> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(SelectionError::InvalidAlpha(cfg.alpha));
    }
    if att.view_ids != feat.view_ids || att.anchor != feat.anchor {
        return Err(SelectionError::IndexMismatch);
    }
    let a = cfg.alpha;
    let scores = att
        .scores
        .iter()
        .zip(&feat.scores)
        .map(|(&x, &y)| a * x + (1.0 - a) * y)
        .collect();
    Ok(ScoreRow::new(att.anchor.clone(), att.view_ids.clone(), scores))
}

/// Fused score row for an anchor.
///
/// Both rows are normalised over the context views only (the anchor's
/// self-score would otherwise pin the maximum); the anchor's fused entry is
/// set to 1.
pub fn fused_row(att: &ScoreRow, feat: &ScoreRow, cfg: &FusionConfig) -> Result<ScoreRow, SelectionError> {
    if att.view_ids != feat.view_ids || att.anchor != feat.anchor {
        return Err(SelectionError::IndexMismatch);
    }
    let anchor = att
        .anchor_index()
        .ok_or_else(|| SelectionError::AnchorMissing(att.anchor.clone()))?;
    let context = |row: &ScoreRow| -> Result<Vec<f64>, SelectionError> {
        let ctx: Vec<f64> = row
            .scores
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != anchor)
            .map(|(_, &s)| s)
            .collect();
        let mut norm = normalize_for_fusion(&ctx)?;
        norm.insert(anchor, 1.0);
        Ok(norm)
    };
    let att_n = ScoreRow::new(att.anchor.clone(), att.view_ids.clone(), context(att)?);
    let feat_n = ScoreRow::new(feat.anchor.clone(), feat.view_ids.clone(), context(feat)?);
    fuse_scores(&att_n, &feat_n, cfg)
}

/// Per-label kept/rejected counts (the anchor counts as kept).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LabelCounts {
    pub clean_kept: usize,
    pub clean_rejected: usize,
    pub distractors_kept: usize,
    pub distractors_rejected: usize,
    pub unknown_kept: usize,
    pub unknown_rejected: usize,
}

/// Input to the exporter's second pass: the views to re-run the backbone on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkOrder {
    pub set_id: String,
    pub anchor: String,
    pub kept: Vec<String>,
    pub probe: Probe,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionReport {
    pub counts: LabelCounts,
    pub selection: Selection,
    pub work_order: WorkOrder,
}

pub fn selection_report(sel: &Selection, manifest: &ViewManifest) -> SelectionReport {
    let labels: HashMap<String, Label> = manifest.labels();
    let mut counts = LabelCounts::default();
    for v in &sel.per_view {
        let kept = v.verdict != Verdict::Rejected;
        let slot = match (labels.get(&v.view_id).copied().unwrap_or(Label::Unknown), kept) {
            (Label::Clean, true) => &mut counts.clean_kept,
            (Label::Clean, false) => &mut counts.clean_rejected,
            (Label::Distractor, true) => &mut counts.distractors_kept,
            (Label::Distractor, false) => &mut counts.distractors_rejected,
            (Label::Unknown, true) => &mut counts.unknown_kept,
            (Label::Unknown, false) => &mut counts.unknown_rejected,
        };
        *slot += 1;
    }
    SelectionReport {
        counts,
        selection: sel.clone(),
        work_order: WorkOrder {
            set_id: manifest.set_id.clone(),
            anchor: sel.anchor.clone(),
            kept: sel.kept.clone(),
            probe: sel.probe,
            tau: sel.threshold,
        },
    }
}

/// How per-anchor kept sets merge into one reconstruction set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    Union,
    Intersection,
}

/// One selection per anchor row of the matrix.
pub fn select_all(matrix: &ScoreMatrix, tau: f64) -> Result<Vec<Selection>, SelectionError> {
    matrix
        .anchors
        .iter()
        .map(|a| {
            let row = matrix.row(a).ok_or_else(|| SelectionError::AnchorMissing(a.clone()))?;
            select_views(&row, tau, matrix.probe)
        })
        .collect()
}

/// Merges kept sets, returned in `view_order`.
pub fn combine_selections(
    selections: &[Selection],
    view_order: &[String],
    mode: CombineMode,
) -> Result<Vec<String>, SelectionError> {
    if selections.is_empty() {
        return Err(SelectionError::Empty);
    }
    let sets: Vec<HashSet<&str>> = selections
        .iter()
        .map(|s| s.kept.iter().map(String::as_str).collect())
        .collect();
    Ok(view_order
        .iter()
        .filter(|v| match mode {
            CombineMode::Union => sets.iter().any(|s| s.contains(v.as_str())),
            CombineMode::Intersection => sets.iter().all(|s| s.contains(v.as_str())),
        })
        .cloned()
        .collect())
}
