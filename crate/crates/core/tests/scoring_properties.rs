mod common;

use proptest::prelude::*;
use viewsift_core::scoring::{
    attention_matrix_from_qk, score_matrix, score_row, AttentionMode, Probe, QkBlock, ScoreOptions, ScoringError,
};
use viewsift_core::tensorstore::{Role, TensorBlob, ViewManifest};

fn opts(probe: Probe, mode: AttentionMode) -> ScoreOptions {
    ScoreOptions {
        probe,
        mode,
        ..ScoreOptions::default()
    }
}

fn rescale_features(m: &ViewManifest, factors: &[f32]) -> ViewManifest {
    let mut out = m.clone();
    for (i, v) in out.views.iter_mut().enumerate() {
        let blob = v.load(Role::Features).unwrap();
        let d = blob.shape[2];
        let data = blob
            .data
            .chunks(d)
            .enumerate()
            .flat_map(|(p, patch)| {
                let f = factors[(i * 31 + p) % factors.len()];
                patch.iter().map(move |x| x * f)
            })
            .collect();
        let scaled = TensorBlob::new(
            Role::Features,
            blob.shape.clone(),
            blob.layer,
            blob.view_id.clone(),
            data,
        )
        .unwrap();
        *v = v.clone().with_tensor(scaled);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_scores_ignore_patch_norms(seed in 0u64..10_000, factors in prop::collection::vec(0.125f32..8.0, 1..8)) {
        let inst = common::random_instance(seed);
        let anchor = inst.manifest.views[0].view_id.clone();
        let base = score_row(&inst.manifest, &anchor, &ScoreOptions::default()).unwrap();
        let scaled = score_row(&rescale_features(&inst.manifest, &factors), &anchor, &ScoreOptions::default()).unwrap();
        for (a, b) in base.scores.iter().zip(&scaled.scores) {
            prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn scores_follow_view_permutations(seed in 0u64..10_000, shift in 1usize..5) {
        let inst = common::random_instance(seed);
        let m = &inst.manifest;
        let ids = m.view_ids();
        let anchor = ids[0].clone();
        let mut rotated = ids.clone();
        rotated.rotate_left(shift % ids.len());
        let p = m.subset("permuted", &rotated).unwrap();
        for o in [opts(Probe::Feature, AttentionMode::RawMean), opts(Probe::Attention, AttentionMode::RawMean), opts(Probe::Attention, AttentionMode::MinmaxNormalized)] {
            let a = score_row(m, &anchor, &o).unwrap();
            let b = score_row(&p, &anchor, &o).unwrap();
            for id in &ids {
                let (x, y) = (a.score(id).unwrap(), b.score(id).unwrap());
                prop_assert!((x - y).abs() < 1e-12, "{:?} {id}: {x} vs {y}", o.probe);
            }
        }
    }
}

#[test]
fn exported_rows_match_qk_path() {
    for seed in 0..20 {
        let inst = common::random_instance(seed);
        let m = &inst.manifest;
        let g = m.grid;
        let (hw, ps, t) = (g.num_patches(), g.patch_start_idx, g.tokens_per_image);
        let (heads, d) = (inst.heads, inst.d_head);
        let mut patch_q = Vec::new();
        for h in 0..heads {
            let start = (h * t + ps) * d;
            patch_q.extend_from_slice(&inst.queries[0][start..start + hw * d]);
        }
        let q = QkBlock::new(heads, hw, d, &patch_q).unwrap();
        let keys: Vec<QkBlock> = inst
            .keys
            .iter()
            .map(|k| QkBlock::new(heads, t, d, k).unwrap())
            .collect();
        let rows = attention_matrix_from_qk(&q, &keys).unwrap();
        for r in rows.data.chunks(rows.n_keys) {
            let s: f64 = r.iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-4, "row sum {s}");
        }

        let mut with_rows = m.clone();
        let anchor = with_rows.views[0].view_id.clone();
        let blob = TensorBlob::new(
            Role::AttentionRows,
            vec![heads, hw, rows.n_keys],
            Some(7),
            anchor.clone(),
            rows.data,
        )
        .unwrap();
        with_rows.views[0] = with_rows.views[0].clone().with_tensor(blob);
        with_rows.validate().unwrap();
        for mode in [AttentionMode::RawMean, AttentionMode::MinmaxNormalized] {
            let a = score_row(m, &anchor, &opts(Probe::Attention, mode)).unwrap();
            let b = score_row(&with_rows, &anchor, &opts(Probe::Attention, mode)).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert!((x - y).abs() < 1e-6, "seed {seed} {mode:?}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn matrix_is_identical_across_thread_counts() {
    let inst = common::random_instance(99);
    let run = |threads: usize, probe: Probe| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                score_matrix(&inst.manifest, &opts(probe, AttentionMode::MinmaxNormalized), None)
                    .unwrap()
                    .to_csv()
            })
    };
    for probe in [Probe::Feature, Probe::Attention] {
        assert_eq!(run(1, probe), run(4, probe));
    }
}

#[test]
fn matrix_rows_equal_single_rows() {
    let inst = common::random_instance(5);
    let o = opts(Probe::Attention, AttentionMode::RawMean);
    let mat = score_matrix(&inst.manifest, &o, None).unwrap();
    for a in &mat.anchors {
        assert_eq!(mat.row(a).unwrap(), score_row(&inst.manifest, a, &o).unwrap());
    }
}

#[test]
fn missing_keys_are_reported_per_view() {
    let inst = common::random_instance(3);
    let mut m = inst.manifest.clone();
    m.views[1].tensors.remove(&Role::Keys);
    let anchor = m.views[0].view_id.clone();
    match score_row(&m, &anchor, &opts(Probe::Attention, AttentionMode::RawMean)) {
        Err(ScoringError::MissingRoles(report)) => {
            assert_eq!(report.missing.len(), 1);
            assert_eq!(report.missing[0].view_id, m.views[1].view_id);
            assert_eq!(report.missing[0].roles, vec![Role::Keys]);
        }
        other => panic!("expected MissingRoles, got {other:?}"),
    }
    // Feature scoring does not need keys.
    assert!(score_row(&m, &anchor, &ScoreOptions::default()).is_ok());
}
