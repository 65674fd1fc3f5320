//! Per-view relevance scores from a backbone's internal representations.

mod attention;
mod feature;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use attention::{
    attention_matrix_from_qk, attention_view_scores, mean_attention_from_qk, AttentionMode, AttentionRows,
    AttentionScores, QkBlock,
};
pub use feature::{
    feature_correlation_map, feature_score_from_means, feature_view_score, CorrelationMap, NormalizedFeatures,
};

use crate::selection::{fused_row, FusionConfig, SelectionError};
use crate::tensorstore::{validate_set, ManifestError, Role, TensorBlob, ValidationReport, ViewManifest};

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("missing roles: {0}")]
    MissingRoles(ValidationReport),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("attention covers {actual} key tokens, expected {expected}")]
    TokenCountMismatch { expected: usize, actual: usize },
    #[error("attention maps are constant across the set (max == min), min-max normalisation is undefined")]
    DegenerateAttention,
    #[error("view {view_id}: zero-norm feature vector at patch ({row}, {col})")]
    ZeroNorm { view_id: String, row: usize, col: usize },
    #[error("anchor {0:?} is not in the set")]
    UnknownAnchor(String),
    #[error("fusion failed: {0}")]
    Fusion(#[from] SelectionError),
}

/// Which internal signal a score is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    Attention,
    Feature,
    Fused,
}

impl Probe {
    pub fn as_str(self) -> &'static str {
        match self {
            Probe::Attention => "attention",
            Probe::Feature => "feature",
            Probe::Fused => "fused",
        }
    }
}

impl fmt::Display for Probe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scores assigned by one anchor to every view of the set (anchor included),
/// in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub anchor: String,
    pub view_ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl ScoreRow {
    pub fn new(anchor: impl Into<String>, view_ids: Vec<String>, scores: Vec<f64>) -> Self {
        assert_eq!(view_ids.len(), scores.len(), "one score per view");
        ScoreRow {
            anchor: anchor.into(),
            view_ids,
            scores,
        }
    }

    pub fn anchor_index(&self) -> Option<usize> {
        self.view_ids.iter().position(|v| *v == self.anchor)
    }

    pub fn score(&self, view_id: &str) -> Option<f64> {
        self.view_ids.iter().position(|v| v == view_id).map(|i| self.scores[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub probe: Probe,
    pub mode: AttentionMode,
    pub fusion: FusionConfig,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            probe: Probe::Feature,
            mode: AttentionMode::default(),
            fusion: FusionConfig::default(),
        }
    }
}

/// Anchor-by-view score matrix for one probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreMatrix {
    pub set_id: String,
    pub probe: Probe,
    pub mode: AttentionMode,
    pub layer: u32,
    pub view_ids: Vec<String>,
    pub anchors: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Sidecar record describing how a [`ScoreMatrix`] was produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreMatrixMeta {
    pub set_id: String,
    pub probe: Probe,
    pub mode: Option<AttentionMode>,
    pub alpha: Option<f64>,
    pub layer: u32,
    pub n_views: usize,
    pub anchors: Vec<String>,
}

impl ScoreMatrix {
    pub fn row(&self, anchor: &str) -> Option<ScoreRow> {
        let i = self.anchors.iter().position(|a| a == anchor)?;
        Some(ScoreRow::new(anchor, self.view_ids.clone(), self.rows[i].clone()))
    }

    pub fn get(&self, anchor: &str, view: &str) -> Option<f64> {
        let i = self.anchors.iter().position(|a| a == anchor)?;
        let j = self.view_ids.iter().position(|v| v == view)?;
        Some(self.rows[i][j])
    }

    /// CSV with a header of view ids and one row per anchor.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["anchor".to_string()];
        header.extend(self.view_ids.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (a, row) in self.anchors.iter().zip(&self.rows) {
            let mut rec = vec![a.clone()];
            rec.extend(row.iter().map(|s| s.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn metadata(&self, opts: &ScoreOptions) -> ScoreMatrixMeta {
        ScoreMatrixMeta {
            set_id: self.set_id.clone(),
            probe: self.probe,
            mode: (self.probe != Probe::Feature).then_some(self.mode),
            alpha: (self.probe == Probe::Fused).then_some(opts.fusion.alpha),
            layer: self.layer,
            n_views: self.view_ids.len(),
            anchors: self.anchors.clone(),
        }
    }
}

fn require(manifest: &ViewManifest, roles: &[Role]) -> Result<(), ScoringError> {
    let report = validate_set(manifest, &roles.iter().copied().collect::<BTreeSet<_>>());
    if report.ok() {
        Ok(())
    } else {
        Err(ScoringError::MissingRoles(report))
    }
}

/// Loaded inputs shared by every anchor of one manifest.
struct Inputs<'m> {
    manifest: &'m ViewManifest,
    feature_means: Option<Vec<Vec<f64>>>,
    keys: Option<Vec<Arc<TensorBlob>>>,
}

impl<'m> Inputs<'m> {
    fn prepare(manifest: &'m ViewManifest, probe: Probe, anchors: &[usize]) -> Result<Self, ScoringError> {
        let wants_feature = matches!(probe, Probe::Feature | Probe::Fused);
        let wants_attention = matches!(probe, Probe::Attention | Probe::Fused);

        let feature_means = if wants_feature {
            require(manifest, &[Role::Features])?;
            let means = manifest
                .views
                .par_iter()
                .map(|v| {
                    let blob = v.load(Role::Features)?;
                    Ok(NormalizedFeatures::from_blob(&blob)?.mean_vector())
                })
                .collect::<Result<Vec<_>, ScoringError>>()?;
            Some(means)
        } else {
            None
        };

        let mut keys = None;
        if wants_attention {
            let needs_qk = anchors.iter().any(|&a| !manifest.views[a].has(Role::AttentionRows));
            if needs_qk {
                let anchor_lacks: Vec<_> = anchors
                    .iter()
                    .filter(|&&a| !manifest.views[a].has(Role::AttentionRows))
                    .map(|&a| manifest.views[a].clone())
                    .collect();
                let sub = ViewManifest {
                    views: anchor_lacks,
                    ..manifest.clone()
                };
                require(&sub, &[Role::Queries])?;
                require(manifest, &[Role::Keys])?;
                keys = Some(
                    manifest
                        .views
                        .iter()
                        .map(|v| v.load(Role::Keys))
                        .collect::<Result<Vec<_>, _>>()?,
                );
            }
        }
        Ok(Inputs {
            manifest,
            feature_means,
            keys,
        })
    }

    fn feature_row(&self, anchor: usize) -> Vec<f64> {
        let means = self.feature_means.as_ref().expect("features prepared");
        means
            .iter()
            .map(|m| feature_score_from_means(&means[anchor], m))
            .collect()
    }

    fn attention_row(&self, anchor: usize, mode: AttentionMode) -> Result<Vec<f64>, ScoringError> {
        let m = self.manifest;
        let view = &m.views[anchor];
        let grid = &m.grid;
        let mean_row = if view.has(Role::AttentionRows) {
            let blob = view.load(Role::AttentionRows)?;
            let (heads, nq, nk) = (blob.shape[0], blob.shape[1], blob.shape[2]);
            let expected = m.len() * grid.tokens_per_image;
            if nk != expected {
                return Err(ScoringError::TokenCountMismatch { expected, actual: nk });
            }
            let rows = AttentionRows::new(heads, nq, nk, blob.data.clone())?;
            rows.mean_row()
        } else {
            let q = view.load(Role::Queries)?;
            let (heads, d) = (q.shape[0], q.shape[2]);
            let hw = grid.num_patches();
            let mut patch_q = Vec::with_capacity(heads * hw * d);
            for h in 0..heads {
                let start = (h * grid.tokens_per_image + grid.patch_start_idx) * d;
                patch_q.extend_from_slice(&q.data[start..start + hw * d]);
            }
            let q_block = QkBlock::new(heads, hw, d, &patch_q)?;
            let keys = self.keys.as_ref().expect("keys prepared");
            let k_blocks = keys
                .iter()
                .map(|k| QkBlock::new(k.shape[0], k.shape[1], k.shape[2], &k.data))
                .collect::<Result<Vec<_>, _>>()?;
            mean_attention_from_qk(&q_block, &k_blocks)?
        };
        let ids = m.view_ids();
        let scores = attention_view_scores(&mean_row, grid, &ids, &view.view_id, mode, Some(m.layer_of_interest))?;
        Ok(scores.scores)
    }

    fn row(&self, anchor: usize, opts: &ScoreOptions) -> Result<Vec<f64>, ScoringError> {
        match opts.probe {
            Probe::Feature => Ok(self.feature_row(anchor)),
            Probe::Attention => self.attention_row(anchor, opts.mode),
            Probe::Fused => {
                let ids = self.manifest.view_ids();
                let anchor_id = &ids[anchor];
                let att = ScoreRow::new(anchor_id.clone(), ids.clone(), self.attention_row(anchor, opts.mode)?);
                let feat = ScoreRow::new(anchor_id.clone(), ids, self.feature_row(anchor));
                Ok(fused_row(&att, &feat, &opts.fusion)?.scores)
            }
        }
    }
}

fn anchor_indices(manifest: &ViewManifest, anchors: &[String]) -> Result<Vec<usize>, ScoringError> {
    anchors
        .iter()
        .map(|a| {
            manifest
                .index_of(a)
                .ok_or_else(|| ScoringError::UnknownAnchor(a.clone()))
        })
        .collect()
}

/// Scores every view of the set from one anchor's point of view.
pub fn score_row(manifest: &ViewManifest, anchor: &str, opts: &ScoreOptions) -> Result<ScoreRow, ScoringError> {
    let idx = anchor_indices(manifest, &[anchor.to_string()])?;
    let inputs = Inputs::prepare(manifest, opts.probe, &idx)?;
    let scores = inputs.row(idx[0], opts)?;
    Ok(ScoreRow::new(anchor, manifest.view_ids(), scores))
}

/// Anchor-by-view scores. `anchors = None` uses every view as an anchor.
pub fn score_matrix(
    manifest: &ViewManifest,
    opts: &ScoreOptions,
    anchors: Option<&[String]>,
) -> Result<ScoreMatrix, ScoringError> {
    let view_ids = manifest.view_ids();
    let anchors: Vec<String> = anchors.map_or_else(|| view_ids.clone(), |a| a.to_vec());
    let idx = anchor_indices(manifest, &anchors)?;
    let inputs = Inputs::prepare(manifest, opts.probe, &idx)?;
    let rows = idx
        .par_iter()
        .map(|&a| inputs.row(a, opts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScoreMatrix {
        set_id: manifest.set_id.clone(),
        probe: opts.probe,
        mode: opts.mode,
        layer: manifest.layer_of_interest,
        view_ids,
        anchors,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorstore::{Label, TokenGrid, ViewRecord};

    fn feature_view(id: &str, v: [f32; 3]) -> ViewRecord {
        let data = v.iter().copied().cycle().take(4 * 3).collect();
        ViewRecord::new(id, Label::Clean)
            .with_tensor(TensorBlob::new(Role::Features, vec![2, 2, 3], Some(0), id, data).unwrap())
    }

    fn manifest(views: Vec<ViewRecord>) -> ViewManifest {
        let mut m = ViewManifest::new("t", TokenGrid::new(2, 2, 0, 3).unwrap(), 0);
        m.views = views;
        m
    }

    #[test]
    fn identical_views_score_one() {
        let m = manifest(vec![
            feature_view("a", [1.0, 2.0, 3.0]),
            feature_view("b", [1.0, 2.0, 3.0]),
        ]);
        let sm = score_matrix(&m, &ScoreOptions::default(), None).unwrap();
        for row in &sm.rows {
            for &s in row {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_matrix_is_symmetric() {
        let m = manifest(vec![
            feature_view("a", [1.0, 0.2, 0.0]),
            feature_view("b", [0.3, 1.0, -0.5]),
            feature_view("c", [-1.0, 0.1, 0.7]),
        ]);
        let sm = score_matrix(&m, &ScoreOptions::default(), None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((sm.rows[i][j] - sm.rows[j][i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn attention_without_keys_is_missing_role() {
        let m = manifest(vec![feature_view("a", [1.0, 0.0, 0.0])]);
        let opts = ScoreOptions {
            probe: Probe::Attention,
            ..Default::default()
        };
        let err = score_matrix(&m, &opts, None).unwrap_err();
        assert!(matches!(err, ScoringError::MissingRoles(_)));
    }

    #[test]
    fn unknown_anchor() {
        let m = manifest(vec![feature_view("a", [1.0, 0.0, 0.0])]);
        assert!(matches!(
            score_row(&m, "zz", &ScoreOptions::default()),
            Err(ScoringError::UnknownAnchor(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let m = manifest(vec![
            feature_view("a", [1.0, 0.0, 0.0]),
            feature_view("b", [0.0, 1.0, 0.0]),
        ]);
        let sm = score_matrix(&m, &ScoreOptions::default(), None).unwrap();
        assert_eq!(sm.to_csv(), "anchor,a,b\na,1,0\nb,0,1\n");
    }
}
