//! Brute-force reference implementations shared by integration tests.
//!
//! These deliberately avoid the library's scoring code paths: plain nested
//! loops, no chunking, no cached means.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewsift_core::tensorstore::{Label, Role, TensorBlob, TokenGrid, ViewManifest, ViewRecord};

/// Mean over all patch pairs of the cosine between two `[h, w, d]` maps.
pub fn brute_feature_score(a: &[f32], b: &[f32], positions: usize, d: usize) -> f64 {
    let unit = |x: &[f32], p: usize| -> Vec<f64> {
        let v: Vec<f64> = x[p * d..(p + 1) * d].iter().map(|&v| v as f64).collect();
        let n = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        v.into_iter().map(|t| t / n).collect()
    };
    let mut total = 0.0;
    for p in 0..positions {
        let u = unit(a, p);
        for q in 0..positions {
            let v = unit(b, q);
            total += u.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    total / (positions * positions) as f64
}

/// Per-view attention scores of `anchor`: softmax(QKᵀ/√d) for every head and
/// every anchor patch query, averaged over heads and queries, sliced per view.
pub fn brute_attention_scores(
    queries: &[Vec<f32>],
    keys: &[Vec<f32>],
    anchor: usize,
    heads: usize,
    d: usize,
    grid: &TokenGrid,
    minmax: bool,
) -> Vec<f64> {
    let t = grid.tokens_per_image;
    let hw = grid.num_patches();
    let ps = grid.patch_start_idx;
    let n = keys.len();
    let at = |x: &[f32], h: usize, tok: usize, c: usize| x[(h * t + tok) * d + c] as f64;

    let mut weight = vec![0.0f64; n * t];
    for h in 0..heads {
        for qt in ps..ps + hw {
            let mut logits = Vec::with_capacity(n * t);
            for k in keys {
                for kt in 0..t {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += at(&queries[anchor], h, qt, c) * at(k, h, kt, c);
                    }
                    logits.push(dot / (d as f64).sqrt());
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, x) in weight.iter_mut().zip(&e) {
                *w += x / z;
            }
        }
    }
    for w in &mut weight {
        *w /= (heads * hw) as f64;
    }
    let maps: Vec<Vec<f64>> = (0..n).map(|j| weight[j * t + ps..j * t + ps + hw].to_vec()).collect();
    let (lo, hi) = if minmax {
        let all: Vec<f64> = maps.iter().flatten().copied().collect();
        (
            all.iter().cloned().fold(f64::INFINITY, f64::min),
            all.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    } else {
        (0.0, 1.0)
    };
    maps.iter()
        .map(|m| m.iter().map(|x| (x - lo) / (hi - lo)).sum::<f64>() / hw as f64)
        .collect()
}

/// A random small instance: features plus Q/K for `n` views.
pub struct RandomInstance {
    pub manifest: ViewManifest,
    pub features: Vec<Vec<f32>>,
    pub queries: Vec<Vec<f32>>,
    pub keys: Vec<Vec<f32>>,
    pub heads: usize,
    pub d_head: usize,
}

pub fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(1..=4);
    let w = rng.random_range(1..=4);
    let ps = rng.random_range(0..=2);
    let d = rng.random_range(2..=16);
    let heads = rng.random_range(1..=4);
    let d_head = rng.random_range(1..=16);
    let n = rng.random_range(2..=5);
    let grid = TokenGrid::new(h, w, ps, d).unwrap();
    let t = grid.tokens_per_image;

    let mut m = ViewManifest::new(format!("rand-{seed}"), grid, 7);
    let (mut features, mut queries, mut keys) = (vec![], vec![], vec![]);
    for v in 0..n {
        let id = format!("v{v}");
        // Keep features away from zero so every patch has a direction.
        let f: Vec<f32> = (0..h * w * d)
            .map(|i| {
                if i % d == 0 {
                    rng.random_range(0.5..2.0)
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        let q: Vec<f32> = (0..heads * t * d_head).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k: Vec<f32> = (0..heads * t * d_head).map(|_| rng.random_range(-2.0..2.0)).collect();
        let rec = ViewRecord::new(id.clone(), Label::Unknown)
            .with_tensor(TensorBlob::new(Role::Features, vec![h, w, d], Some(7), id.clone(), f.clone()).unwrap())
            .with_tensor(
                TensorBlob::new(Role::Queries, vec![heads, t, d_head], Some(7), id.clone(), q.clone()).unwrap(),
            )
            .with_tensor(TensorBlob::new(Role::Keys, vec![heads, t, d_head], Some(7), id.clone(), k.clone()).unwrap());
        m.views.push(rec);
        features.push(f);
        queries.push(q);
        keys.push(k);
    }
    m.validate().unwrap();
    RandomInstance {
        manifest: m,
        features,
        queries,
        keys,
        heads,
        d_head,
    }
}
