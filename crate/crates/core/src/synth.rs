//! Synthetic representations, trajectories and depth maps with known answers.
//!
//! Set layout: clean views `c000, c001, ...` followed by distractors
//! `d000, ...`. The anchor of every planted construction is `c000`.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitBall, UnitSphere};
use serde::Serialize;

use crate::evalmetrics::{DepthPair, MetricError, Pose, Sim3, Trajectory};
use crate::tensorstore::{Label, PoseConvention, Role, TensorBlob, TensorRef, TokenGrid, ViewManifest, ViewRecord};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("feature_dim {feature_dim} leaves no direction orthogonal to {axes} scene axes")]
    FeatureDimTooSmall { feature_dim: usize, axes: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

impl From<MetricError> for SynthError {
    fn from(e: MetricError) -> Self {
        SynthError::InvalidSpec(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSpec {
    pub n_clean: usize,
    pub n_distractor: usize,
    pub grid: TokenGrid,
    /// The scene direction is the normalised sum of this many leading axes.
    pub clean_axis_count: usize,
    /// Expected norm of the per-position feature noise before renormalisation.
    pub noise_sigma: f64,
    pub seed: u64,
    pub layer: u32,
    pub heads: usize,
    pub d_head: usize,
    /// Softmax mass the anchor's queries put on clean context patch tokens.
    pub clean_attention_mass: f64,
    /// Multiplies every key logit; large values sharpen rows towards one-hot.
    pub logit_scale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_clean: 30,
            n_distractor: 10,
            grid: TokenGrid {
                h_patches: 4,
                w_patches: 4,
                patch_start_idx: 1,
                tokens_per_image: 17,
                feature_dim: 64,
            },
            clean_axis_count: 1,
            noise_sigma: 0.1,
            seed: 0,
            layer: 23,
            heads: 2,
            d_head: 8,
            clean_attention_mass: 0.9,
            logit_scale: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.grid
            .validate()
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        if self.n_clean == 0 {
            return Err(SynthError::InvalidSpec("need at least one clean view".into()));
        }
        if self.clean_axis_count == 0 || self.grid.feature_dim <= self.clean_axis_count {
            return Err(SynthError::FeatureDimTooSmall {
                feature_dim: self.grid.feature_dim,
                axes: self.clean_axis_count,
            });
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::InvalidSpec(format!(
                "noise_sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        if self.heads == 0 || self.d_head == 0 {
            return Err(SynthError::InvalidSpec("heads and d_head must be positive".into()));
        }
        if !(self.clean_attention_mass > 0.0 && self.clean_attention_mass < 1.0) {
            return Err(SynthError::InvalidSpec(
                "clean_attention_mass must lie in (0, 1)".into(),
            ));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(SynthError::InvalidSpec("logit_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn view_ids(&self) -> Vec<(String, Label)> {
        let clean = (0..self.n_clean).map(|i| (format!("c{i:03}"), Label::Clean));
        let distractors = (0..self.n_distractor).map(|i| (format!("d{i:03}"), Label::Distractor));
        clean.chain(distractors).collect()
    }

    fn set_id(&self) -> String {
        format!("synth-{}", self.seed)
    }

    fn empty_manifest(&self) -> ViewManifest {
        let mut m = ViewManifest::new(self.set_id(), self.grid, self.layer);
        m.views = self
            .view_ids()
            .into_iter()
            .map(|(id, label)| ViewRecord::new(id, label))
            .collect();
        m
    }
}

/// Unit features per view: clean views share one scene direction, distractor
/// `i` uses axis `clean_axis_count + i` (cycling over the remaining axes).
pub fn gen_feature_set(spec: &SynthSpec) -> Result<ViewManifest, SynthError> {
    spec.validate()?;
    let d = spec.grid.feature_dim;
    let k = spec.clean_axis_count;
    let hw = spec.grid.num_patches();
    let mut scene = vec![0.0f64; d];
    scene[..k].fill(1.0 / (k as f64).sqrt());

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per_component = spec.noise_sigma / (d as f64).sqrt();
    let mut manifest = spec.empty_manifest();
    for (i, view) in manifest.views.iter_mut().enumerate() {
        let base = if i < spec.n_clean {
            scene.clone()
        } else {
            let mut e = vec![0.0; d];
            e[k + (i - spec.n_clean) % (d - k)] = 1.0;
            e
        };
        let mut data = Vec::with_capacity(hw * d);
        let mut v = vec![0.0f64; d];
        for _ in 0..hw {
            for (x, b) in v.iter_mut().zip(&base) {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x = b + per_component * n;
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.iter().map(|x| (x / norm) as f32));
        }
        let blob = TensorBlob::new(
            Role::Features,
            vec![spec.grid.h_patches, spec.grid.w_patches, d],
            Some(spec.layer),
            view.view_id.clone(),
            data,
        )
        .expect("consistent shape");
        *view = view.clone().with_tensor(blob);
    }
    Ok(manifest)
}

/// Planted attention of the anchor's queries, recorded alongside a Q/K set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QkOracle {
    pub set_id: String,
    pub anchor: String,
    pub clean_attention_mass: f64,
    pub logit_scale: f64,
    /// Softmax mass on each view's patch tokens (`logit_scale == 1`).
    pub patch_mass: BTreeMap<String, f64>,
    /// Mean attention per patch token of each view, i.e. the raw score.
    pub raw_score: BTreeMap<String, f64>,
}

/// Queries and keys such that every query row has softmax mass
/// `clean_attention_mass` spread evenly over clean context patch tokens and
/// the rest spread evenly over all other tokens.
///
/// Every query is `√d_head · e₀`, so the logit of a key is its first
/// component; that component is `logit_scale · ln(planted mass)`.
pub fn gen_qk_set(spec: &SynthSpec) -> Result<(ViewManifest, QkOracle), SynthError> {
    spec.validate()?;
    let g = &spec.grid;
    let (t, hw, ps) = (g.tokens_per_image, g.num_patches(), g.patch_start_idx);
    let n = spec.n_clean + spec.n_distractor;
    let clean_ctx = spec.n_clean - 1;
    let (on_clean, other) = if clean_ctx == 0 {
        (0.0, 1.0 / (n * t) as f64)
    } else {
        (
            spec.clean_attention_mass / (clean_ctx * hw) as f64,
            (1.0 - spec.clean_attention_mass) / (n * t - clean_ctx * hw) as f64,
        )
    };

    let mut q = vec![0.0f32; spec.heads * t * spec.d_head];
    for row in q.chunks_mut(spec.d_head) {
        row[0] = (spec.d_head as f64).sqrt() as f32;
    }

    let mut manifest = spec.empty_manifest();
    let mut patch_mass = BTreeMap::new();
    let mut raw_score = BTreeMap::new();
    for (i, view) in manifest.views.iter_mut().enumerate() {
        let clean_context = i > 0 && i < spec.n_clean;
        let patch = if clean_context { on_clean } else { other };
        let mut k = vec![0.0f32; spec.heads * t * spec.d_head];
        for h in 0..spec.heads {
            for tok in 0..t {
                let mass = if tok >= ps && tok < ps + hw { patch } else { other };
                k[(h * t + tok) * spec.d_head] = (spec.logit_scale * mass.ln()) as f32;
            }
        }
        patch_mass.insert(view.view_id.clone(), patch * hw as f64);
        raw_score.insert(view.view_id.clone(), patch);
        let shape = vec![spec.heads, t, spec.d_head];
        let qb = TensorBlob::new(
            Role::Queries,
            shape.clone(),
            Some(spec.layer),
            view.view_id.clone(),
            q.clone(),
        )
        .expect("consistent shape");
        let kb =
            TensorBlob::new(Role::Keys, shape, Some(spec.layer), view.view_id.clone(), k).expect("consistent shape");
        *view = view.clone().with_tensor(qb).with_tensor(kb);
    }
    let oracle = QkOracle {
        set_id: manifest.set_id.clone(),
        anchor: manifest.views[0].view_id.clone(),
        clean_attention_mass: spec.clean_attention_mass,
        logit_scale: spec.logit_scale,
        patch_mass,
        raw_score,
    };
    Ok((manifest, oracle))
}

/// Features and Q/K for the same views in one manifest.
pub fn gen_full_set(spec: &SynthSpec) -> Result<(ViewManifest, QkOracle), SynthError> {
    let mut features = gen_feature_set(spec)?;
    let (qk, oracle) = gen_qk_set(spec)?;
    for (f, q) in features.views.iter_mut().zip(qk.views) {
        f.tensors.extend(q.tensors);
    }
    Ok((features, oracle))
}

/// Haar-uniform random rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let mut c = [0.0f64; 4];
    for x in &mut c {
        *x = StandardNormal.sample(rng);
    }
    UnitQuaternion::from_quaternion(Quaternion::new(c[0], c[1], c[2], c[3]))
        .to_rotation_matrix()
        .into_inner()
}

/// Rotation by `angle_deg` about a uniformly random axis.
pub fn rotation_about_random_axis<R: Rng + ?Sized>(rng: &mut R, angle_deg: f64) -> Matrix3<f64> {
    let a: [f64; 3] = UnitSphere.sample(rng);
    let axis = Unit::new_normalize(Vector3::from(a));
    UnitQuaternion::from_axis_angle(&axis, angle_deg.to_radians())
        .to_rotation_matrix()
        .into_inner()
}

/// Scale in `[0.5, 2]` (log-uniform), Haar rotation, translation in `[-5, 5]³`.
pub fn random_sim3<R: Rng + ?Sized>(rng: &mut R) -> Sim3 {
    let scale = 2f64.powf(rng.random_range(-1.0..=1.0));
    let rotation = random_rotation(rng);
    let translation = Vector3::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    );
    Sim3 {
        scale,
        rotation,
        translation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PlantedSim3 {
    Identity,
    Random,
    Given(Sim3),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectorySpec {
    pub n: usize,
    pub seed: u64,
    pub convention: PoseConvention,
    /// Each predicted center moves by a uniform offset of norm at most this.
    pub center_noise: f64,
    /// Extra rotation (degrees) applied to relative motion `k → k+1`.
    pub rotation_perturbation: Option<(usize, f64)>,
    pub planted: PlantedSim3,
}

impl TrajectorySpec {
    pub fn noiseless(n: usize, seed: u64) -> Self {
        TrajectorySpec {
            n,
            seed,
            convention: PoseConvention::CameraFromWorld,
            center_noise: 0.0,
            rotation_perturbation: None,
            planted: PlantedSim3::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrajectory {
    pub gt: Trajectory,
    pub pred: Trajectory,
    /// Maps ground-truth world coordinates onto prediction world coordinates.
    pub planted: Sim3,
    pub spec: TrajectorySpec,
}

/// Random-walk ground truth and a prediction built from the same relative
/// motions, then perturbed and mapped through a planted similarity.
pub fn gen_trajectory(spec: &TrajectorySpec) -> Result<SynthTrajectory, SynthError> {
    if spec.n < 3 {
        return Err(SynthError::InvalidSpec(format!(
            "trajectory needs n >= 3, got {}",
            spec.n
        )));
    }
    if !(spec.center_noise >= 0.0) {
        return Err(SynthError::InvalidSpec("center_noise must be >= 0".into()));
    }
    if let Some((k, _)) = spec.rotation_perturbation {
        if k + 1 >= spec.n {
            return Err(SynthError::InvalidSpec(format!(
                "no relative motion {k} in {} poses",
                spec.n
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let first = Pose::new(
        random_rotation(&mut rng),
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ),
    );
    let mut steps = Vec::with_capacity(spec.n - 1);
    for _ in 1..spec.n {
        let angle = rng.random_range(0.0..15.0);
        let r = rotation_about_random_axis(&mut rng, angle);
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let len = rng.random_range(0.5..1.5);
        steps.push(Pose::new(r, len * Vector3::from(dir)));
    }

    let mut gt_w = vec![first];
    let mut pred_w = vec![first];
    for (k, step) in steps.iter().enumerate() {
        gt_w.push(gt_w[k].compose(step));
        let mut s = *step;
        if let Some((pk, deg)) = spec.rotation_perturbation {
            if pk == k {
                s.rotation = rotation_about_random_axis(&mut rng, deg) * s.rotation;
            }
        }
        pred_w.push(pred_w[k].compose(&s));
    }
    if spec.center_noise > 0.0 {
        for p in &mut pred_w {
            let u: [f64; 3] = UnitBall.sample(&mut rng);
            p.translation += spec.center_noise * Vector3::from(u);
        }
    }
    let planted = match spec.planted {
        PlantedSim3::Identity => Sim3::identity(),
        PlantedSim3::Random => random_sim3(&mut rng),
        PlantedSim3::Given(s) => s,
    };

    let ids: Vec<String> = (0..spec.n).map(|i| format!("v{i:03}")).collect();
    let stored = |w: &[Pose]| -> Vec<(String, Pose)> {
        ids.iter()
            .cloned()
            .zip(w.iter().map(|p| match spec.convention {
                PoseConvention::WorldFromCamera => *p,
                PoseConvention::CameraFromWorld => p.inverse(),
            }))
            .collect()
    };
    let gt = Trajectory::new(spec.convention, stored(&gt_w))?;
    let pred = Trajectory::new(spec.convention, stored(&pred_w))?.transformed(&planted);
    Ok(SynthTrajectory {
        gt,
        pred,
        planted,
        spec: *spec,
    })
}

/// Ground truth uniform in `[1, 10]`, prediction `a·gt + b`, and exactly
/// `round(hole_fraction · h · w)` masked pixels.
pub fn gen_depth_pair(
    h: usize,
    w: usize,
    a: f64,
    b: f64,
    seed: u64,
    hole_fraction: f64,
) -> Result<DepthPair, SynthError> {
    if !(a > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(SynthError::InvalidSpec(format!("affine ({a}, {b}) needs a > 0")));
    }
    if !(0.0..1.0).contains(&hole_fraction) || h * w == 0 {
        return Err(SynthError::InvalidSpec(
            "need a non-empty image and hole_fraction in [0, 1)".into(),
        ));
    }
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..10.0)).collect();
    let pred = gt.iter().map(|g| a * g + b).collect();
    let holes = (hole_fraction * n as f64).round() as usize;
    let mut valid = vec![true; n];
    for i in rand::seq::index::sample(&mut rng, n, holes) {
        valid[i] = false;
    }
    Ok(DepthPair::new(h, w, pred, gt, valid)?)
}

/// Attaches ground-truth poses and depth maps to every view of `manifest`
/// and returns a matching prediction manifest: poses under a random planted
/// similarity and depths under a random positive affine map, so every
/// metric of the prediction is zero (δ is one).
pub fn attach_ground_truth(
    manifest: &mut ViewManifest,
    seed: u64,
    depth_hw: (usize, usize),
) -> Result<ViewManifest, SynthError> {
    let traj = gen_trajectory(&TrajectorySpec {
        convention: manifest.pose_convention,
        ..TrajectorySpec::noiseless(manifest.len().max(3), seed)
    })?;
    let (h, w) = depth_hw;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_de97);
    let mut pred = ViewManifest::new(
        format!("{}-pred", manifest.set_id),
        manifest.grid,
        manifest.layer_of_interest,
    );
    pred.pose_convention = manifest.pose_convention;
    for (i, view) in manifest.views.iter_mut().enumerate() {
        let id = view.view_id.clone();
        let a = rng.random_range(0.5..2.0);
        let b = rng.random_range(-0.5..0.5);
        let pair = gen_depth_pair(h, w, a, b, seed.wrapping_add(i as u64 + 1), 0.0)?;
        let depth = |data: &[f64]| {
            TensorBlob::new(
                Role::Depth,
                vec![h, w],
                None,
                id.clone(),
                data.iter().map(|&x| x as f32).collect(),
            )
            .expect("depth shape")
        };
        view.gt_pose = Some(TensorRef::Memory(Arc::new(traj.gt.poses[i].1.to_blob(&id))));
        view.gt_depth = Some(TensorRef::Memory(Arc::new(depth(&pair.gt))));
        pred.views.push(
            ViewRecord::new(id.clone(), view.label)
                .with_tensor(traj.pred.poses[i].1.to_blob(&id))
                .with_tensor(depth(&pair.pred)),
        );
    }
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalmetrics::{ate, depth_metrics, rpe};
    use crate::scoring::{score_row, AttentionMode, Probe, ScoreOptions};

    fn small(n_clean: usize, n_distractor: usize, sigma: f64) -> SynthSpec {
        SynthSpec {
            n_clean,
            n_distractor,
            noise_sigma: sigma,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noiseless_features_hit_exact_scores() {
        let m = gen_feature_set(&small(2, 1, 0.0)).unwrap();
        let row = score_row(&m, "c000", &ScoreOptions::default()).unwrap();
        assert!((row.scores[1] - 1.0).abs() < 1e-9);
        assert!(row.scores[2].abs() < 1e-9);
    }

    #[test]
    fn distractor_axes_cycle() {
        let spec = SynthSpec {
            grid: TokenGrid::new(1, 1, 0, 3).unwrap(),
            clean_axis_count: 2,
            noise_sigma: 0.0,
            ..small(1, 3, 0.0)
        };
        let m = gen_feature_set(&spec).unwrap();
        let first = |i: usize| m.views[i].load(Role::Features).unwrap().data.clone();
        assert_eq!(first(1), vec![0.0, 0.0, 1.0]);
        assert_eq!(first(3), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn feature_dim_too_small() {
        let spec = SynthSpec {
            grid: TokenGrid::new(2, 2, 0, 4).unwrap(),
            clean_axis_count: 4,
            ..SynthSpec::default()
        };
        assert!(matches!(
            gen_feature_set(&spec),
            Err(SynthError::FeatureDimTooSmall { .. })
        ));
    }

    #[test]
    fn generators_are_deterministic() {
        let spec = small(3, 2, 0.2);
        assert_eq!(gen_feature_set(&spec).unwrap(), gen_feature_set(&spec).unwrap());
        let t = TrajectorySpec::noiseless(6, 4);
        assert_eq!(gen_trajectory(&t).unwrap(), gen_trajectory(&t).unwrap());
    }

    #[test]
    fn planted_attention_mass() {
        let spec = small(5, 3, 0.0);
        let (m, oracle) = gen_qk_set(&spec).unwrap();
        let opts = ScoreOptions {
            probe: Probe::Attention,
            mode: AttentionMode::RawMean,
            ..ScoreOptions::default()
        };
        let row = score_row(&m, "c000", &opts).unwrap();
        let hw = spec.grid.num_patches() as f64;
        let clean: f64 = row.scores[1..5].iter().map(|s| s * hw).sum();
        assert!((clean - 0.9).abs() < 0.02, "clean mass {clean}");
        for (id, s) in row.view_ids.iter().zip(&row.scores) {
            assert!((s - oracle.raw_score[id]).abs() < 1e-6);
        }
    }

    #[test]
    fn trajectory_oracles() {
        let t = gen_trajectory(&TrajectorySpec::noiseless(8, 1)).unwrap();
        assert!(ate(&t.pred, &t.gt).unwrap().ate < 1e-9);
        let spec = TrajectorySpec {
            rotation_perturbation: Some((2, 3.0)),
            ..TrajectorySpec::noiseless(9, 2)
        };
        let t = gen_trajectory(&spec).unwrap();
        let r = rpe(&t.pred, &t.gt).unwrap();
        assert!((r.rot_deg - 3.0 / 8f64.sqrt()).abs() < 1e-9, "{}", r.rot_deg);
        assert!(gen_trajectory(&TrajectorySpec::noiseless(2, 0)).is_err());
    }

    #[test]
    fn depth_pair_oracles() {
        let p = gen_depth_pair(6, 5, 3.0, -1.0, 9, 0.3).unwrap();
        assert_eq!(p.valid.iter().filter(|v| !**v).count(), 9);
        let m = depth_metrics(&p).unwrap();
        assert_eq!(m.n_valid, 21);
        assert!(m.abs_rel < 1e-9 && m.delta_125 == 1.0);
        assert!(gen_depth_pair(2, 2, 0.0, 1.0, 0, 0.0).is_err());
    }
}
