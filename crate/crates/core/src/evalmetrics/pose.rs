//! Camera trajectories, similarity alignment, ATE and RPE.

use std::collections::{HashMap, HashSet};

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use super::MetricError;
use crate::tensorstore::{PoseConvention, Role, TensorBlob};

const ROTATION_TOL: f64 = 1e-6;
/// Second singular value below this fraction of the first means the point
/// cloud is (numerically) collinear.
const RANK_TOL: f64 = 1e-12;

/// A rigid pose `[R | t]`, interpreted according to the owning trajectory's convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Pose::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Reads a `[3, 4]` or `[4, 4]` pose blob.
    pub fn from_blob(blob: &TensorBlob) -> Result<Pose, MetricError> {
        if blob.role != Role::Pose || !(blob.shape == [3, 4] || blob.shape == [4, 4]) {
            return Err(MetricError::InvalidPose {
                view_id: blob.view_id.clone(),
                detail: format!(
                    "expected a [3,4] or [4,4] pose blob, got {} {:?}",
                    blob.role, blob.shape
                ),
            });
        }
        let at = |r: usize, c: usize| blob.data[r * 4 + c] as f64;
        let rotation = Matrix3::from_fn(at);
        let translation = Vector3::new(at(0, 3), at(1, 3), at(2, 3));
        Ok(Pose::new(rotation, translation))
    }

    pub fn to_blob(&self, view_id: &str) -> TensorBlob {
        let mut data = Vec::with_capacity(16);
        for r in 0..3 {
            for c in 0..3 {
                data.push(self.rotation[(r, c)] as f32);
            }
            data.push(self.translation[r] as f32);
        }
        data.extend_from_slice(&[0.0, 0.0, 0.0, 1.0]);
        TensorBlob::new(Role::Pose, vec![4, 4], None, view_id, data).expect("4x4 pose")
    }

    fn check_rotation(&self, view_id: &str) -> Result<(), MetricError> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(err <= ROTATION_TOL) || !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(MetricError::InvalidPose {
                view_id: view_id.to_string(),
                detail: format!("rotation not in SO(3): |RᵀR - I| = {err:.3e}, det = {det}"),
            });
        }
        Ok(())
    }
}

/// Ordered, uniquely-identified poses under one convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub convention: PoseConvention,
    pub poses: Vec<(String, Pose)>,
}

impl Trajectory {
    pub fn new(convention: PoseConvention, poses: Vec<(String, Pose)>) -> Result<Self, MetricError> {
        let mut seen = HashSet::new();
        for (id, pose) in &poses {
            if !seen.insert(id.as_str()) {
                return Err(MetricError::DuplicateId(id.clone()));
            }
            pose.check_rotation(id)?;
        }
        Ok(Trajectory { convention, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// The pose mapping camera coordinates to world coordinates.
    pub fn world_from_camera(&self, i: usize) -> Pose {
        let p = self.poses[i].1;
        match self.convention {
            PoseConvention::WorldFromCamera => p,
            PoseConvention::CameraFromWorld => p.inverse(),
        }
    }

    pub fn center(&self, i: usize) -> Vector3<f64> {
        self.world_from_camera(i).translation
    }

    /// Applies a similarity transform to the world frame.
    pub fn transformed(&self, sim: &Sim3) -> Trajectory {
        let poses = (0..self.len())
            .map(|i| {
                let w = self.world_from_camera(i);
                let moved = Pose::new(
                    sim.rotation * w.rotation,
                    sim.scale * (sim.rotation * w.translation) + sim.translation,
                );
                let stored = match self.convention {
                    PoseConvention::WorldFromCamera => moved,
                    PoseConvention::CameraFromWorld => moved.inverse(),
                };
                (self.poses[i].0.clone(), stored)
            })
            .collect();
        Trajectory {
            convention: self.convention,
            poses,
        }
    }
}

/// Similarity transform `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Least-squares similarity mapping `source` onto `target` (Umeyama's closed form).
pub fn umeyama_sim3(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Sim3, MetricError> {
    let n = source.len();
    if n != target.len() {
        return Err(MetricError::LengthMismatch {
            left: n,
            right: target.len(),
        });
    }
    if n < 3 {
        return Err(MetricError::TooFewPoints { needed: 3, got: n });
    }
    let nf = n as f64;
    let mu_x = source.iter().sum::<Vector3<f64>>() / nf;
    let mu_y = target.iter().sum::<Vector3<f64>>() / nf;
    let var_x = source.iter().map(|x| (x - mu_x).norm_squared()).sum::<f64>() / nf;
    let mut cov = Matrix3::zeros();
    for (x, y) in source.iter().zip(target) {
        cov += (y - mu_y) * (x - mu_x).transpose();
    }
    cov /= nf;

    if !(var_x > 0.0) {
        return Err(MetricError::RankDeficient("source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| MetricError::RankDeficient("svd failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| MetricError::RankDeficient("svd failed".into()))?;
    let d = svd.singular_values;

    let mut sorted = [d[0], d[1], d[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[1] > RANK_TOL * sorted[0]) {
        return Err(MetricError::RankDeficient(
            "cross-covariance has rank < 2 (collinear or coincident points)".into(),
        ));
    }

    // Reflection fix: flip the direction of the smallest singular value.
    let mut s = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        let smallest = (0..3).min_by(|&a, &b| d[a].total_cmp(&d[b])).expect("3 values");
        s[smallest] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s) * v_t;
    let scale = d.dot(&s) / var_x;
    let translation = mu_y - scale * (rotation * mu_x);
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

/// Indices `(pred_idx, gt_idx)` of ids present in both, in ground-truth order.
pub(crate) fn match_ids(pred: &Trajectory, gt: &Trajectory) -> Vec<(usize, usize)> {
    let pred_idx: HashMap<&str, usize> = pred
        .poses
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i))
        .collect();
    gt.poses
        .iter()
        .enumerate()
        .filter_map(|(g, (id, _))| pred_idx.get(id.as_str()).map(|&p| (p, g)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AteResult {
    pub ate: f64,
    pub alignment: Sim3,
    pub matched: usize,
    /// Fraction of ground-truth poses that have a prediction.
    pub coverage: f64,
}

/// RMSE of camera centers after similarity alignment of prediction onto ground truth.
pub fn ate(pred: &Trajectory, gt: &Trajectory) -> Result<AteResult, MetricError> {
    let pairs = match_ids(pred, gt);
    if pairs.len() < 3 {
        return Err(MetricError::TooFewPoints {
            needed: 3,
            got: pairs.len(),
        });
    }
    let src: Vec<_> = pairs.iter().map(|&(p, _)| pred.center(p)).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, g)| gt.center(g)).collect();
    let sim = umeyama_sim3(&src, &dst)?;
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(x, y)| (sim.apply(x) - y).norm_squared())
        .sum();
    Ok(AteResult {
        ate: (sq / pairs.len() as f64).sqrt(),
        alignment: sim,
        matched: pairs.len(),
        coverage: pairs.len() as f64 / gt.len() as f64,
    })
}

/// Geodesic angle of a rotation, in degrees.
///
/// Uses `atan2(|axis|, cos)` rather than `acos`, which loses half its digits
/// near the identity.
pub fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    let cos = (r.trace() - 1.0) / 2.0;
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = axis.norm() / 2.0;
    sin.atan2(cos).to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RpeResult {
    pub trans: f64,
    pub rot_deg: f64,
    pub pairs: usize,
    /// Scale applied to predicted relative translations.
    pub scale: f64,
    pub coverage: f64,
}

/// Scale taking predicted centers to ground-truth centers: the similarity
/// scale when alignment is well-posed, else the ratio of RMS spreads.
fn trajectory_scale(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    if let Ok(sim) = umeyama_sim3(src, dst) {
        return sim.scale;
    }
    let spread = |pts: &[Vector3<f64>]| {
        let mu = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        pts.iter().map(|p| (p - mu).norm_squared()).sum::<f64>().sqrt()
    };
    let (sp, sg) = (spread(src), spread(dst));
    if sp > 0.0 {
        sg / sp
    } else {
        1.0
    }
}

/// Relative pose error over consecutive frames (ground-truth order, shared ids).
///
/// Relative motions are `Δ_k = T_k⁻¹ T_{k+1}` on world-from-camera poses.
/// Predicted relative translations are multiplied by the trajectory
/// alignment scale before differencing.
pub fn rpe(pred: &Trajectory, gt: &Trajectory) -> Result<RpeResult, MetricError> {
    let pairs = match_ids(pred, gt);
    if pairs.len() < 2 {
        return Err(MetricError::TooFewPoints {
            needed: 2,
            got: pairs.len(),
        });
    }
    let src: Vec<_> = pairs.iter().map(|&(p, _)| pred.center(p)).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, g)| gt.center(g)).collect();
    let scale = trajectory_scale(&src, &dst);

    let mut sq_t = 0.0;
    let mut sq_r = 0.0;
    for w in pairs.windows(2) {
        let (p0, g0) = w[0];
        let (p1, g1) = w[1];
        let dp = pred
            .world_from_camera(p0)
            .inverse()
            .compose(&pred.world_from_camera(p1));
        let dg = gt.world_from_camera(g0).inverse().compose(&gt.world_from_camera(g1));
        sq_t += (scale * dp.translation - dg.translation).norm_squared();
        sq_r += rotation_angle_deg(&(dp.rotation * dg.rotation.transpose())).powi(2);
    }
    let m = (pairs.len() - 1) as f64;
    Ok(RpeResult {
        trans: (sq_t / m).sqrt(),
        rot_deg: (sq_r / m).sqrt(),
        pairs: pairs.len() - 1,
        scale,
        coverage: pairs.len() as f64 / gt.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};

    fn rot(axis: [f64; 3], deg: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), deg.to_radians()).into_inner()
    }

    fn traj(centers: &[[f64; 3]]) -> Trajectory {
        let poses = centers
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    format!("v{i}"),
                    Pose::new(rot([0.0, 1.0, 0.2], 7.0 * i as f64), Vector3::from(*c)),
                )
            })
            .collect();
        Trajectory::new(PoseConvention::WorldFromCamera, poses).unwrap()
    }

    #[test]
    fn identity_alignment() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(0.0, 0.0, 3.0),
        ];
        let s = umeyama_sim3(&pts, &pts).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-9);
        assert!((s.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(s.translation.norm() < 1e-9);
    }

    #[test]
    fn two_points_rejected() {
        let pts = [Vector3::zeros(), Vector3::x()];
        assert!(matches!(
            umeyama_sim3(&pts, &pts),
            Err(MetricError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn collinear_points_rejected() {
        let pts: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(umeyama_sim3(&pts, &pts), Err(MetricError::RankDeficient(_))));
    }

    #[test]
    fn coplanar_points_with_reflection_candidate() {
        // Planar sources admit a reflection with equal residual; the fix must pick det = +1.
        let src: Vec<_> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.5, 0.0]]
            .iter()
            .map(|p| Vector3::from(*p))
            .collect();
        let r = rot([0.3, -0.2, 0.9], 140.0);
        let dst: Vec<_> = src
            .iter()
            .map(|p| 2.0 * (r * p) + Vector3::new(1.0, 2.0, 3.0))
            .collect();
        let s = umeyama_sim3(&src, &dst).unwrap();
        assert!((s.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!((s.rotation - r).abs().max() < 1e-9);
        assert!((s.scale - 2.0).abs() < 1e-9);
    }

    #[test]
    fn ate_zero_for_identical() {
        let t = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0]]);
        let r = ate(&t, &t).unwrap();
        assert!(r.ate < 1e-12);
        assert_eq!(r.coverage, 1.0);
        let p = rpe(&t, &t).unwrap();
        assert!(p.trans < 1e-12 && p.rot_deg < 1e-9);
    }

    #[test]
    fn ate_uses_shared_ids_and_reports_coverage() {
        let gt = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0]]);
        let mut pred = gt.clone();
        pred.poses.remove(1);
        let r = ate(&pred, &gt).unwrap();
        assert_eq!(r.matched, 3);
        assert!((r.coverage - 0.75).abs() < 1e-15);
    }

    #[test]
    fn camera_from_world_centers() {
        let r = rot([1.0, 0.0, 0.0], 90.0);
        let c = Vector3::new(1.0, 2.0, 3.0);
        // x_cam = R (x_world - c)  =>  t = -R c
        let t = Trajectory::new(
            PoseConvention::CameraFromWorld,
            vec![("a".into(), Pose::new(r, -(r * c)))],
        )
        .unwrap();
        assert!((t.center(0) - c).norm() < 1e-12);
    }

    #[test]
    fn small_angles_are_accurate() {
        let r = rot([0.0, 0.0, 1.0], 1e-7);
        assert!((rotation_angle_deg(&r) - 1e-7).abs() < 1e-15);
        assert_eq!(rotation_angle_deg(&Matrix3::identity()), 0.0);
        assert!((rotation_angle_deg(&rot([1.0, 1.0, 0.0], 179.0)) - 179.0).abs() < 1e-9);
    }

    #[test]
    fn non_rotation_rejected() {
        let bad = Pose::new(Matrix3::identity() * 1.1, Vector3::zeros());
        assert!(matches!(
            Trajectory::new(PoseConvention::WorldFromCamera, vec![("x".into(), bad)]),
            Err(MetricError::InvalidPose { .. })
        ));
        let reflect = Pose::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)), Vector3::zeros());
        assert!(Trajectory::new(PoseConvention::WorldFromCamera, vec![("x".into(), reflect)]).is_err());
    }

    #[test]
    fn pose_blob_round_trip() {
        let p = Pose::new(rot([0.0, 1.0, 0.0], 30.0), Vector3::new(0.5, -1.0, 2.0));
        let q = Pose::from_blob(&p.to_blob("v")).unwrap();
        assert!((p.rotation - q.rotation).abs().max() < 1e-6);
        assert!((p.translation - q.translation).norm() < 1e-6);
    }
}
