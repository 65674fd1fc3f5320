use std::collections::BTreeMap;

use viewsift_core::protocol::{
    aggregate, aggregate_to_csv, run_trials, sample_trial, LevelName, Pools, Predictions, Profile, ProtocolError,
    RunSpec, TrialConfig,
};
use viewsift_core::synth::{attach_ground_truth, gen_feature_set, SynthSpec};
use viewsift_core::tensorstore::{TokenGrid, ViewManifest};

fn pool(n_clean: usize, n_distractor: usize) -> ViewManifest {
    gen_feature_set(&SynthSpec {
        n_clean,
        n_distractor,
        grid: TokenGrid::new(3, 3, 1, 32).unwrap(),
        seed: 21,
        ..SynthSpec::default()
    })
    .unwrap()
}

// Reproduced independently from the documented generator in another language.
#[test]
fn sampling_matches_the_documented_algorithm() {
    let c: Vec<String> = (0..60).map(|i| format!("c{i:03}")).collect();
    let d: Vec<String> = (0..60).map(|i| format!("d{i:03}")).collect();
    let t = sample_trial(&c, &d, Profile::Default.level(LevelName::Small), 0).unwrap();
    assert_eq!(
        t.order[..8],
        ["d018", "c022", "c030", "c021", "c038", "d014", "d055", "c056"]
    );
    assert_eq!(t.anchor, "c022");
}

#[test]
fn clean_separable_pool_gives_perfect_trials() {
    let p = pool(14, 30);
    let cfg = TrialConfig {
        profile: Profile::Eth3d,
        n_trials: 10,
        ..TrialConfig::default()
    };
    let reports = run_trials(&p, &Pools::from_labels(&p), &cfg, &Predictions::new()).unwrap();
    assert_eq!(reports.len(), 30);
    for r in &reports {
        assert_eq!(r.stats.success_rate, 1.0, "{}", r.set_id);
        assert_eq!(r.stats.clean_retention, Some(1.0));
        assert!(r.metrics.is_none());
    }
    let agg = aggregate(&reports);
    assert_eq!(agg.iter().map(|a| a.level.set_size()).collect::<Vec<_>>(), [19, 28, 44]);
    assert!(agg.iter().all(|a| a.success_rate == 1.0 && a.n_trials == 10));
}

#[test]
fn predictions_for_some_trials_only() {
    let mut p = pool(30, 10);
    let pred = attach_ground_truth(&mut p, 5, (3, 4)).unwrap();
    let mut predictions = Predictions::new();
    predictions.insert((LevelName::Small, 1), pred);
    let cfg = TrialConfig {
        levels: vec![LevelName::Small],
        n_trials: 3,
        ..TrialConfig::default()
    };
    let reports = run_trials(&p, &Pools::from_labels(&p), &cfg, &predictions).unwrap();
    assert!(reports[0].metrics.is_none() && reports[2].metrics.is_none());
    let m = reports[1].metrics.expect("metrics for small/1");
    assert!(m.ate.unwrap() < 1e-5, "{m:?}");
    assert!(m.abs_rel.unwrap() < 1e-5);
    assert_eq!(m.delta125, Some(1.0));
    assert_eq!(m.coverage, 1.0);
    assert!(reports[1].to_json().contains("\"metrics\""));
    assert!(!reports[0].to_json().contains("\"metrics\""));

    let agg = aggregate(&reports);
    assert_eq!(agg[0].trials_with_metrics, 1);
    assert_eq!(agg[0].ate, m.ate);
    let csv = aggregate_to_csv(&agg);
    assert_eq!(csv.lines().count(), 2);
    let row = reports[1].metric_row(&cfg.method()).unwrap();
    assert_eq!(row.noise_level.as_deref(), Some("small"));
    assert_eq!(row.method, "feature@0.65");
}

#[test]
fn aggregate_equals_brute_force_mean() {
    let p = pool(30, 50);
    let cfg = TrialConfig {
        n_trials: 4,
        tau: 0.9999,
        ..TrialConfig::default()
    };
    let reports = run_trials(&p, &Pools::from_labels(&p), &cfg, &Predictions::new()).unwrap();
    let mut by_level: BTreeMap<LevelName, Vec<f64>> = BTreeMap::new();
    for r in &reports {
        by_level
            .entry(r.level.name)
            .or_default()
            .push(r.stats.clean_retention.unwrap());
    }
    for a in aggregate(&reports) {
        let v = &by_level[&a.level.name];
        let brute = v.iter().sum::<f64>() / v.len() as f64;
        assert!((a.clean_retention.unwrap() - brute).abs() <= 1e-12);
    }
}

#[test]
fn component_errors_carry_the_trial() {
    let p = pool(30, 10);
    let mut pools = Pools::from_labels(&p);
    pools.clean.push("ghost".into());
    let cfg = TrialConfig {
        levels: vec![LevelName::Small],
        n_trials: 40,
        ..TrialConfig::default()
    };
    match run_trials(&p, &pools, &cfg, &Predictions::new()) {
        Err(ProtocolError::Trial { level, trial, source }) => {
            assert_eq!(level, LevelName::Small);
            assert!(trial < 40);
            assert!(source.to_string().contains("ghost"), "{source}");
        }
        other => panic!("expected a tagged trial error, got {other:?}"),
    }
}

#[test]
fn run_spec_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = pool(30, 10);
    let pred = attach_ground_truth(&mut p, 1, (2, 2)).unwrap();
    p.save(dir.path().join("pool/manifest.json")).unwrap();
    pred.save(dir.path().join("pred/small_0.json")).unwrap();
    let spec = r#"{
        "manifest": "pool/manifest.json",
        "levels": ["small"],
        "n_trials": 2,
        "base_seed": 100,
        "predictions": {"small/0": "pred/small_0.json"}
    }"#;
    std::fs::write(dir.path().join("run.json"), spec).unwrap();
    let run = RunSpec::load(dir.path().join("run.json")).unwrap().resolve().unwrap();
    assert_eq!(run.config.base_seed, 100);
    assert_eq!(run.pools.clean.len(), 30);
    let reports = run_trials(&run.pool, &run.pools, &run.config, &run.predictions).unwrap();
    assert_eq!(reports[0].seed, 100);
    assert!(reports[0].metrics.is_some() && reports[1].metrics.is_none());
}
