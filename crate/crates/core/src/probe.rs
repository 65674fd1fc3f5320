//! Layer-wise clean/distractor separation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::scoring::{score_row, AttentionMode, Probe, ScoreOptions, ScoringError};
use crate::tensorstore::{Label, ViewManifest};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("layer curves are defined for the attention and feature probes, not {0}")]
    UnsupportedProbe(Probe),
    #[error("set {0:?} has no distractor views")]
    NoDistractors(String),
    #[error("set {0:?} has no clean context views")]
    NoCleanContext(String),
    #[error("anchor {anchor:?} of set {set_id:?} is not labelled clean")]
    AnchorNotClean { set_id: String, anchor: String },
    #[error("set {set_id:?} does not cover the same views as the other layers")]
    ViewMismatch { set_id: String },
    #[error("no manifests given")]
    Empty,
    #[error("curve has no layers")]
    EmptyCurve,
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerGap {
    pub layer: u32,
    pub clean_mean: f64,
    pub distractor_mean: f64,
    /// `clean_mean - distractor_mean`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerGapCurve {
    pub probe: Probe,
    pub per_layer: Vec<LayerGap>,
}

impl LayerGapCurve {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "clean_mean", "distractor_mean", "gap"])
            .expect("in-memory write");
        for e in &self.per_layer {
            w.write_record([
                e.layer.to_string(),
                e.clean_mean.to_string(),
                e.distractor_mean.to_string(),
                e.gap.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Mean anchor→clean-context and anchor→distractor scores of one set.
fn set_means(m: &ViewManifest, anchor: &str, opts: &ScoreOptions) -> Result<(f64, f64), ProbeError> {
    let labels = m.labels();
    if labels.get(anchor) != Some(&Label::Clean) {
        return Err(ProbeError::AnchorNotClean {
            set_id: m.set_id.clone(),
            anchor: anchor.to_string(),
        });
    }
    let row = score_row(m, anchor, opts)?;
    let (mut clean, mut distractor) = (Vec::new(), Vec::new());
    for (id, &s) in row.view_ids.iter().zip(&row.scores) {
        match labels[id] {
            Label::Clean if id != anchor => clean.push(s),
            Label::Distractor => distractor.push(s),
            _ => {}
        }
    }
    if distractor.is_empty() {
        return Err(ProbeError::NoDistractors(m.set_id.clone()));
    }
    if clean.is_empty() {
        return Err(ProbeError::NoCleanContext(m.set_id.clone()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&clean), mean(&distractor)))
}

/// Gap curve over manifests, one per `(layer, set)`. Manifests sharing a
/// layer (e.g. several trials) are averaged. The anchor defaults to the first
/// clean view of each manifest.
pub fn layer_gap_curve(
    manifests: &[ViewManifest],
    probe: Probe,
    mode: AttentionMode,
    anchor: Option<&str>,
) -> Result<LayerGapCurve, ProbeError> {
    if probe == Probe::Fused {
        return Err(ProbeError::UnsupportedProbe(probe));
    }
    if manifests.is_empty() {
        return Err(ProbeError::Empty);
    }
    let opts = ScoreOptions {
        probe,
        mode,
        ..ScoreOptions::default()
    };
    let mut coverage: BTreeMap<u32, Vec<Vec<String>>> = BTreeMap::new();
    for m in manifests {
        let mut ids = m.view_ids();
        ids.sort();
        coverage.entry(m.layer_of_interest).or_default().push(ids);
    }
    let mut coverage: Vec<(u32, Vec<Vec<String>>)> = coverage.into_iter().collect();
    for (_, sets) in &mut coverage {
        sets.sort();
    }
    if let Some((layer, _)) = coverage.iter().find(|(_, sets)| *sets != coverage[0].1) {
        let set_id = manifests
            .iter()
            .find(|m| m.layer_of_interest == *layer)
            .map(|m| m.set_id.clone())
            .unwrap_or_default();
        return Err(ProbeError::ViewMismatch { set_id });
    }

    let per_set = manifests
        .par_iter()
        .map(|m| {
            let a = match anchor {
                Some(a) => a.to_string(),
                None => m
                    .views
                    .iter()
                    .find(|v| v.label == Label::Clean)
                    .map(|v| v.view_id.clone())
                    .ok_or_else(|| ProbeError::NoCleanContext(m.set_id.clone()))?,
            };
            set_means(m, &a, &opts).map(|means| (m.layer_of_interest, means))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut by_layer: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for (layer, means) in per_set {
        by_layer.entry(layer).or_default().push(means);
    }
    let per_layer = by_layer
        .into_iter()
        .map(|(layer, sets)| {
            let n = sets.len() as f64;
            let clean_mean = sets.iter().map(|s| s.0).sum::<f64>() / n;
            let distractor_mean = sets.iter().map(|s| s.1).sum::<f64>() / n;
            LayerGap {
                layer,
                clean_mean,
                distractor_mean,
                gap: clean_mean - distractor_mean,
            }
        })
        .collect();
    Ok(LayerGapCurve { probe, per_layer })
}

/// Layer with the largest gap; ties go to the smallest layer index.
pub fn best_layer(curve: &LayerGapCurve) -> Result<u32, ProbeError> {
    let mut best: Option<&LayerGap> = None;
    for e in &curve.per_layer {
        best = match best {
            Some(b) if e.gap > b.gap || (e.gap == b.gap && e.layer < b.layer) => Some(e),
            Some(b) => Some(b),
            None => Some(e),
        };
    }
    best.map(|e| e.layer).ok_or(ProbeError::EmptyCurve)
}
