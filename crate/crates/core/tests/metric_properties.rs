use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewsift_core::evalmetrics::{ate, depth_metrics, rpe, umeyama_sim3, DepthPair, Pose, Sim3, Trajectory};
use viewsift_core::synth::{gen_trajectory, random_rotation, rotation_about_random_axis, PlantedSim3, TrajectorySpec};
use viewsift_core::tensorstore::PoseConvention;

fn objective(s: &Sim3, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    src.iter().zip(dst).map(|(x, y)| (s.apply(x) - y).norm_squared()).sum()
}

fn world_from_camera(t: &Trajectory, i: usize) -> (Matrix3<f64>, Vector3<f64>) {
    let p = &t.poses[i].1;
    match t.convention {
        PoseConvention::WorldFromCamera => (p.rotation, p.translation),
        PoseConvention::CameraFromWorld => (p.rotation.transpose(), -(p.rotation.transpose() * p.translation)),
    }
}

fn noisy(seed: u64, n: usize) -> viewsift_core::synth::SynthTrajectory {
    gen_trajectory(&TrajectorySpec {
        center_noise: 0.4,
        rotation_perturbation: Some((0, 7.0)),
        planted: PlantedSim3::Random,
        ..TrajectorySpec::noiseless(n, seed)
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn umeyama_is_a_global_minimum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..15);
        let src: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random()) * 4.0).collect();
        let dst: Vec<Vector3<f64>> = src
            .iter()
            .map(|x| 1.7 * x + Vector3::new(rng.random(), rng.random(), rng.random()) * 0.5)
            .collect();
        let best = umeyama_sim3(&src, &dst).unwrap();
        let f0 = objective(&best, &src, &dst);
        for _ in 0..100 {
            let eps = 10f64.powf(rng.random_range(-6.0..-1.0));
            let perturbed = Sim3 {
                scale: best.scale * (1.0 + eps * rng.random_range(-1.0..1.0)),
                rotation: rotation_about_random_axis(&mut rng, eps.to_degrees()) * best.rotation,
                translation: best.translation + Vector3::new(rng.random(), rng.random(), rng.random()) * eps,
            };
            prop_assert!(objective(&perturbed, &src, &dst) >= f0 - 1e-12 * (1.0 + f0));
        }
    }

    #[test]
    fn ate_matches_explicit_residuals(seed in any::<u64>()) {
        let t = noisy(seed, 10);
        let r = ate(&t.pred, &t.gt).unwrap();
        let mut sq = 0.0;
        for i in 0..10 {
            let c_pred = world_from_camera(&t.pred, i).1;
            let c_gt = world_from_camera(&t.gt, i).1;
            sq += (r.alignment.scale * (r.alignment.rotation * c_pred) + r.alignment.translation - c_gt).norm_squared();
        }
        prop_assert!((r.ate - (sq / 10.0).sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn rpe_matches_pairwise_loop(seed in any::<u64>()) {
        let t = noisy(seed, 5);
        let r = rpe(&t.pred, &t.gt).unwrap();
        let (mut st, mut sr) = (0.0, 0.0);
        for k in 0..4 {
            let (rp0, tp0) = world_from_camera(&t.pred, k);
            let (rp1, tp1) = world_from_camera(&t.pred, k + 1);
            let (rg0, tg0) = world_from_camera(&t.gt, k);
            let (rg1, tg1) = world_from_camera(&t.gt, k + 1);
            let (dr_p, dt_p) = (rp0.transpose() * rp1, rp0.transpose() * (tp1 - tp0));
            let (dr_g, dt_g) = (rg0.transpose() * rg1, rg0.transpose() * (tg1 - tg0));
            st += (r.scale * dt_p - dt_g).norm_squared();
            let c = (((dr_p * dr_g.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            sr += c.acos().to_degrees().powi(2);
        }
        prop_assert!((r.trans - (st / 4.0).sqrt()).abs() <= 1e-12);
        prop_assert!((r.rot_deg - (sr / 4.0).sqrt()).abs() <= 1e-9);
    }

    #[test]
    fn depth_metrics_are_bounded(seed in any::<u64>(), n in 2usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..10.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..10.0)).collect();
        let valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
        if let Ok(m) = depth_metrics(&DepthPair::new(1, n, pred, gt, valid).unwrap()) {
            prop_assert!((0.0..=1.0).contains(&m.delta_125));
            prop_assert!(m.abs_rel >= 0.0);
        }
    }
}

#[test]
fn conventions_describe_the_same_cameras() {
    for seed in 0..20 {
        let base = noisy(seed, 8);
        let flip = |t: &Trajectory| {
            let poses = (0..t.len())
                .map(|i| {
                    let (r, c) = world_from_camera(t, i);
                    (t.poses[i].0.clone(), Pose::new(r, c))
                })
                .collect();
            Trajectory::new(PoseConvention::WorldFromCamera, poses).unwrap()
        };
        let (p, g) = (flip(&base.pred), flip(&base.gt));
        let a = ate(&base.pred, &base.gt).unwrap().ate;
        let b = ate(&p, &g).unwrap().ate;
        assert!((a - b).abs() < 1e-9);
        let (r0, r1) = (rpe(&base.pred, &base.gt).unwrap(), rpe(&p, &g).unwrap());
        assert!((r0.rot_deg - r1.rot_deg).abs() < 1e-9 && (r0.trans - r1.trans).abs() < 1e-9);
    }
}

#[test]
fn noise_radius_bounds_ate() {
    for seed in 0..50 {
        let t = gen_trajectory(&TrajectorySpec {
            center_noise: 0.25,
            planted: PlantedSim3::Identity,
            ..TrajectorySpec::noiseless(12, seed)
        })
        .unwrap();
        assert!(ate(&t.pred, &t.gt).unwrap().ate <= 0.25);
    }
}

#[test]
fn coverage_counts_missing_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let poses: Vec<(String, Pose)> = (0..8)
        .map(|i| {
            let c = Vector3::new(rng.random(), rng.random(), rng.random()) * 3.0;
            (format!("v{i}"), Pose::new(random_rotation(&mut rng), c))
        })
        .collect();
    let gt = Trajectory::new(PoseConvention::WorldFromCamera, poses.clone()).unwrap();
    let pred = Trajectory::new(PoseConvention::WorldFromCamera, poses[2..].to_vec()).unwrap();
    let r = ate(&pred, &gt).unwrap();
    assert_eq!(r.matched, 6);
    assert_eq!(r.coverage, 0.75);
    assert!(r.ate < 1e-9);
}
