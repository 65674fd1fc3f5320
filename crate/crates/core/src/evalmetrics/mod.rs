//! Pose and depth metrics over prediction manifests.

mod depth;
mod pose;

use serde::Serialize;

pub use depth::{align_depth, depth_metrics, depth_metrics_aligned, DepthAlignment, DepthMetrics, DepthPair};
pub use pose::{ate, rotation_angle_deg, rpe, umeyama_sim3, AteResult, Pose, RpeResult, Sim3, Trajectory};

use crate::tensorstore::{ManifestError, Role, ViewManifest};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("need at least {needed} matched points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point sets differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("alignment is rank deficient: {0}")]
    RankDeficient(String),
    #[error("view {view_id}: invalid pose, {detail}")]
    InvalidPose { view_id: String, detail: String },
    #[error("duplicate view id {0:?} in trajectory")]
    DuplicateId(String),
    #[error("depth shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("only {0} valid depth pixels")]
    TooFewValid(usize),
    #[error("prediction is constant over valid pixels; scale/shift alignment is singular")]
    SingularDepth,
    #[error("ground-truth manifest has no gt_pose or gt_depth entries")]
    NoGroundTruth,
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

/// Metrics of one prediction set against ground truth. Fields are `None`
/// when too few views overlap to compute them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EvalSummary {
    pub ate: Option<f64>,
    pub rpe_trans: Option<f64>,
    pub rpe_rot: Option<f64>,
    pub abs_rel: Option<f64>,
    pub delta125: Option<f64>,
    /// Fraction of ground-truth views that received a prediction.
    pub coverage: f64,
    pub matched_poses: usize,
    pub matched_depths: usize,
}

fn trajectory_of(manifest: &ViewManifest, from_gt: bool) -> Result<Trajectory, MetricError> {
    let mut poses = Vec::new();
    for v in &manifest.views {
        let blob = if from_gt {
            match &v.gt_pose {
                Some(t) => t.load().map_err(|source| ManifestError::Tensor {
                    view_id: v.view_id.clone(),
                    role: Role::Pose,
                    source,
                })?,
                None => continue,
            }
        } else if v.has(Role::Pose) {
            v.load(Role::Pose)?
        } else {
            continue;
        };
        poses.push((v.view_id.clone(), Pose::from_blob(&blob)?));
    }
    Trajectory::new(manifest.pose_convention, poses)
}

/// Evaluates `pred` (views carrying `pose` / `depth` tensors) against the
/// `gt_pose` / `gt_depth` entries of `gt`, over the views present in both.
/// A `depth_mask` tensor on the ground-truth view restricts depth pixels.
/// Depth metrics are averaged over views.
pub fn evaluate_predictions(pred: &ViewManifest, gt: &ViewManifest) -> Result<EvalSummary, MetricError> {
    let gt_views: Vec<_> = gt
        .views
        .iter()
        .filter(|v| v.gt_pose.is_some() || v.gt_depth.is_some())
        .collect();
    if gt_views.is_empty() {
        return Err(MetricError::NoGroundTruth);
    }
    let covered = gt_views
        .iter()
        .filter(|g| {
            pred.view(&g.view_id)
                .is_ok_and(|p| p.has(Role::Pose) || p.has(Role::Depth))
        })
        .count();
    let mut summary = EvalSummary {
        coverage: covered as f64 / gt_views.len() as f64,
        ..Default::default()
    };

    let pred_traj = trajectory_of(pred, false)?;
    let gt_traj = trajectory_of(gt, true)?;
    summary.matched_poses = pose::match_ids(&pred_traj, &gt_traj).len();
    match ate(&pred_traj, &gt_traj) {
        Ok(r) => summary.ate = Some(r.ate),
        Err(MetricError::TooFewPoints { .. } | MetricError::RankDeficient(_)) => {}
        Err(e) => return Err(e),
    }
    match rpe(&pred_traj, &gt_traj) {
        Ok(r) => {
            summary.rpe_trans = Some(r.trans);
            summary.rpe_rot = Some(r.rot_deg);
        }
        Err(MetricError::TooFewPoints { .. }) => {}
        Err(e) => return Err(e),
    }

    let (mut rel, mut delta, mut n) = (0.0, 0.0, 0usize);
    for g in &gt_views {
        let Some(gt_ref) = &g.gt_depth else { continue };
        let Ok(p) = pred.view(&g.view_id) else { continue };
        if !p.has(Role::Depth) {
            continue;
        }
        let gt_blob = gt_ref.load().map_err(|source| ManifestError::Tensor {
            view_id: g.view_id.clone(),
            role: Role::Depth,
            source,
        })?;
        let mask = if g.has(Role::DepthMask) {
            Some(g.load(Role::DepthMask)?)
        } else {
            None
        };
        let pair = DepthPair::from_blobs(&*p.load(Role::Depth)?, &gt_blob, mask.as_deref())?;
        let m = depth_metrics(&pair)?;
        rel += m.abs_rel;
        delta += m.delta_125;
        n += 1;
    }
    summary.matched_depths = n;
    if n > 0 {
        summary.abs_rel = Some(rel / n as f64);
        summary.delta125 = Some(delta / n as f64);
    }
    Ok(summary)
}

/// One line of the metric report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub set_id: String,
    pub trial: Option<usize>,
    pub noise_level: Option<String>,
    pub method: String,
    pub summary: EvalSummary,
}

pub fn metric_rows_to_csv(rows: &[MetricRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "set_id",
        "trial",
        "noise_level",
        "method",
        "ATE",
        "RPE_trans",
        "RPE_rot",
        "AbsRel",
        "delta125",
        "coverage",
    ])
    .expect("in-memory write");
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.set_id.clone(),
            r.trial.map(|t| t.to_string()).unwrap_or_default(),
            r.noise_level.clone().unwrap_or_default(),
            r.method.clone(),
            opt(s.ate),
            opt(s.rpe_trans),
            opt(s.rpe_rot),
            opt(s.abs_rel),
            opt(s.delta125),
            s.coverage.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
