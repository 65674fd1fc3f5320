//! Controlled noise-injection protocol: trial sampling, success rate and
//! per-level aggregation.
//!
//! Trial `t` of a run uses seed `base_seed + t`. Sampling is done with
//! [`SeededRng`] in this fixed sequence: draw `n_clean` ids from the clean
//! pool, draw `n_noise` ids from the distractor pool, concatenate (clean
//! block first), then shuffle the concatenation. The anchor is the first
//! clean id of the shuffled order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evalmetrics::{evaluate_predictions, EvalSummary, MetricError, MetricRow};
use crate::rng::SeededRng;
use crate::scoring::{score_row, AttentionMode, Probe, ScoreOptions, ScoringError};
use crate::selection::{select_views, FusionConfig, Selection, SelectionError, Thresholds};
use crate::tensorstore::{Label, ManifestError, ViewManifest};

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("{pool} pool has {available} ids, level needs {needed}")]
    PoolTooSmall {
        pool: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("id {0:?} is in both the clean and the distractor pool")]
    OverlappingPools(String),
    #[error("id {0:?} appears twice in one pool")]
    DuplicateId(String),
    #[error("set has no distractor views; success rate is undefined")]
    NoDistractors,
    #[error("view {0:?} has no clean/distractor label")]
    UnlabeledView(String),
    #[error("unknown {kind} {value:?}")]
    UnknownName { kind: &'static str, value: String },
    #[error("invalid run spec: {0}")]
    InvalidSpec(String),
    #[error("run spec {path}: {source}")]
    SpecIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run spec: {0}")]
    SpecJson(#[from] serde_json::Error),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("trial {level}/{trial}: {source}")]
    Trial {
        level: LevelName,
        trial: usize,
        #[source]
        source: Box<TrialError>,
    },
}

/// Component failure inside one trial.
#[derive(Debug, thiserror::Error)]
pub enum TrialError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelName {
    Small,
    Medium,
    Large,
}

impl LevelName {
    pub const ALL: [LevelName; 3] = [LevelName::Small, LevelName::Medium, LevelName::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            LevelName::Small => "small",
            LevelName::Medium => "medium",
            LevelName::Large => "large",
        }
    }
}

impl fmt::Display for LevelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LevelName {
    type Err = ProtocolError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LevelName::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| ProtocolError::UnknownName {
                kind: "level",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Default,
    Eth3d,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Default => "default",
            Profile::Eth3d => "eth3d",
        }
    }

    pub fn level(self, name: LevelName) -> NoiseLevel {
        let (n_clean, n_noise) = match (self, name) {
            (Profile::Default, LevelName::Small) => (30, 10),
            (Profile::Default, LevelName::Medium) => (30, 30),
            (Profile::Default, LevelName::Large) => (30, 50),
            (Profile::Eth3d, LevelName::Small) => (14, 5),
            (Profile::Eth3d, LevelName::Medium) => (14, 14),
            (Profile::Eth3d, LevelName::Large) => (14, 30),
        };
        NoiseLevel { name, n_clean, n_noise }
    }

    pub fn levels(self) -> [NoiseLevel; 3] {
        LevelName::ALL.map(|l| self.level(l))
    }
}

impl FromStr for Profile {
    type Err = ProtocolError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Profile::Default),
            "eth3d" => Ok(Profile::Eth3d),
            _ => Err(ProtocolError::UnknownName {
                kind: "profile",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub name: LevelName,
    pub n_clean: usize,
    pub n_noise: usize,
}

impl NoiseLevel {
    pub fn set_size(&self) -> usize {
        self.n_clean + self.n_noise
    }
}

/// One sampled evaluation set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub level: NoiseLevel,
    pub seed: u64,
    pub clean_ids: Vec<String>,
    pub distractor_ids: Vec<String>,
    /// Order in which views are presented to the backbone.
    pub order: Vec<String>,
    pub anchor: String,
}

fn check_pool(pool: &[String]) -> Result<HashSet<&str>, ProtocolError> {
    let mut seen = HashSet::with_capacity(pool.len());
    for id in pool {
        if !seen.insert(id.as_str()) {
            return Err(ProtocolError::DuplicateId(id.clone()));
        }
    }
    Ok(seen)
}

pub fn sample_trial(
    clean_pool: &[String],
    distractor_pool: &[String],
    level: NoiseLevel,
    seed: u64,
) -> Result<Trial, ProtocolError> {
    let clean = check_pool(clean_pool)?;
    check_pool(distractor_pool)?;
    if let Some(id) = distractor_pool.iter().find(|d| clean.contains(d.as_str())) {
        return Err(ProtocolError::OverlappingPools(id.clone()));
    }
    for (pool, needed, available) in [
        ("clean", level.n_clean, clean_pool.len()),
        ("distractor", level.n_noise, distractor_pool.len()),
    ] {
        if needed > available {
            return Err(ProtocolError::PoolTooSmall {
                pool,
                needed,
                available,
            });
        }
    }
    if level.n_clean == 0 {
        return Err(ProtocolError::PoolTooSmall {
            pool: "clean",
            needed: 1,
            available: 0,
        });
    }

    let mut rng = SeededRng::new(seed);
    let clean_ids = rng.sample(clean_pool, level.n_clean);
    let distractor_ids = rng.sample(distractor_pool, level.n_noise);
    let mut order: Vec<String> = clean_ids.iter().chain(&distractor_ids).cloned().collect();
    rng.shuffle(&mut order);
    let clean_set: HashSet<&str> = clean_ids.iter().map(String::as_str).collect();
    let anchor = order
        .iter()
        .find(|id| clean_set.contains(id.as_str()))
        .cloned()
        .expect("at least one clean id");
    Ok(Trial {
        level,
        seed,
        clean_ids,
        distractor_ids,
        order,
        anchor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuccessStats {
    /// Fraction of distractors rejected.
    pub success_rate: f64,
    /// Fraction of clean context views (anchor excluded) kept; `None` when
    /// the anchor is the only clean view.
    pub clean_retention: Option<f64>,
    pub n_distractors: usize,
    pub distractors_rejected: usize,
    pub n_clean_context: usize,
    pub clean_kept: usize,
}

pub fn success_rate(sel: &Selection, labels: &HashMap<String, Label>) -> Result<SuccessStats, ProtocolError> {
    let kept: HashSet<&str> = sel.kept.iter().map(String::as_str).collect();
    let (mut nd, mut rejected, mut nc, mut clean_kept) = (0, 0, 0, 0);
    for v in &sel.per_view {
        let label = labels
            .get(&v.view_id)
            .copied()
            .ok_or_else(|| ProtocolError::UnlabeledView(v.view_id.clone()))?;
        let is_kept = kept.contains(v.view_id.as_str());
        match label {
            Label::Distractor => {
                nd += 1;
                rejected += usize::from(!is_kept);
            }
            Label::Clean if v.view_id != sel.anchor => {
                nc += 1;
                clean_kept += usize::from(is_kept);
            }
            Label::Clean => {}
            Label::Unknown => return Err(ProtocolError::UnlabeledView(v.view_id.clone())),
        }
    }
    if nd == 0 {
        return Err(ProtocolError::NoDistractors);
    }
    Ok(SuccessStats {
        success_rate: rejected as f64 / nd as f64,
        clean_retention: (nc > 0).then(|| clean_kept as f64 / nc as f64),
        n_distractors: nd,
        distractors_rejected: rejected,
        n_clean_context: nc,
        clean_kept,
    })
}

/// Explicit clean/distractor pools. When absent, pools come from manifest labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pools {
    pub clean: Vec<String>,
    pub distractor: Vec<String>,
}

impl Pools {
    pub fn from_labels(manifest: &ViewManifest) -> Self {
        let pick = |l: Label| {
            manifest
                .views
                .iter()
                .filter(|v| v.label == l)
                .map(|v| v.view_id.clone())
                .collect()
        };
        Pools {
            clean: pick(Label::Clean),
            distractor: pick(Label::Distractor),
        }
    }
}

/// Method and schedule shared by every trial of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialConfig {
    pub profile: Profile,
    pub levels: Vec<LevelName>,
    pub n_trials: usize,
    pub base_seed: u64,
    pub score: ScoreOptions,
    pub tau: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        let score = ScoreOptions::default();
        TrialConfig {
            profile: Profile::Default,
            levels: LevelName::ALL.to_vec(),
            n_trials: 10,
            base_seed: 0,
            tau: Thresholds::default().for_probe(score.probe),
            score,
        }
    }
}

impl TrialConfig {
    /// Label used in metric rows, e.g. `feature@0.65`.
    pub fn method(&self) -> String {
        format!("{}@{}", self.score.probe, self.tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub set_id: String,
    pub profile: Profile,
    pub level: NoiseLevel,
    pub trial: usize,
    pub base_seed: u64,
    pub seed: u64,
    pub probe: Probe,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<AttentionMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub tau: f64,
    pub anchor: String,
    pub order: Vec<String>,
    pub clean_ids: Vec<String>,
    pub distractor_ids: Vec<String>,
    pub kept: Vec<String>,
    pub scores: Vec<f64>,
    #[serde(flatten)]
    pub stats: SuccessStats,
    /// Present only when second-pass predictions were supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalSummary>,
}

impl TrialReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn metric_row(&self, method: &str) -> Option<MetricRow> {
        self.metrics.map(|summary| MetricRow {
            set_id: self.set_id.clone(),
            trial: Some(self.trial),
            noise_level: Some(self.level.name.to_string()),
            method: method.to_string(),
            summary,
        })
    }
}

/// Second-pass prediction manifests keyed by `(level, trial)`.
pub type Predictions = BTreeMap<(LevelName, usize), ViewManifest>;

fn run_one(
    pool: &ViewManifest,
    pools: &Pools,
    cfg: &TrialConfig,
    level: NoiseLevel,
    t: usize,
    predictions: &Predictions,
) -> Result<TrialReport, TrialError> {
    let seed = cfg.base_seed.wrapping_add(t as u64);
    let trial = sample_trial(&pools.clean, &pools.distractor, level, seed)?;
    let set_id = format!("{}/{}/{}", pool.set_id, level.name, t);
    let set = pool.subset(set_id.clone(), &trial.order)?;

    let mut labels: HashMap<String, Label> = HashMap::with_capacity(trial.order.len());
    labels.extend(trial.clean_ids.iter().map(|id| (id.clone(), Label::Clean)));
    labels.extend(trial.distractor_ids.iter().map(|id| (id.clone(), Label::Distractor)));

    let row = score_row(&set, &trial.anchor, &cfg.score)?;
    let sel = select_views(&row, cfg.tau, cfg.score.probe)?;
    let stats = success_rate(&sel, &labels)?;
    let metrics = match predictions.get(&(level.name, t)) {
        Some(pred) => Some(evaluate_predictions(pred, &set)?),
        None => None,
    };
    Ok(TrialReport {
        set_id,
        profile: cfg.profile,
        level,
        trial: t,
        base_seed: cfg.base_seed,
        seed,
        probe: cfg.score.probe,
        mode: (cfg.score.probe != Probe::Feature).then_some(cfg.score.mode),
        alpha: (cfg.score.probe == Probe::Fused).then_some(cfg.score.fusion.alpha),
        tau: cfg.tau,
        anchor: trial.anchor,
        order: trial.order,
        clean_ids: trial.clean_ids,
        distractor_ids: trial.distractor_ids,
        kept: sel.kept,
        scores: row.scores,
        stats,
        metrics,
    })
}

/// Runs every `(level, trial)` pair. Reports come back sorted by level, then trial.
pub fn run_trials(
    pool: &ViewManifest,
    pools: &Pools,
    cfg: &TrialConfig,
    predictions: &Predictions,
) -> Result<Vec<TrialReport>, ProtocolError> {
    let jobs: Vec<(NoiseLevel, usize)> = cfg
        .levels
        .iter()
        .flat_map(|&l| (0..cfg.n_trials).map(move |t| (cfg.profile.level(l), t)))
        .collect();
    let mut reports = jobs
        .par_iter()
        .map(|&(level, t)| {
            run_one(pool, pools, cfg, level, t, predictions).map_err(|e| ProtocolError::Trial {
                level: level.name,
                trial: t,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    reports.sort_by_key(|r| (r.level.name, r.trial));
    Ok(reports)
}

/// Per-level means over trials. Metric means cover only trials with metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelAggregate {
    pub level: NoiseLevel,
    pub n_trials: usize,
    pub success_rate: f64,
    pub clean_retention: Option<f64>,
    pub trials_with_metrics: usize,
    pub ate: Option<f64>,
    pub rpe_trans: Option<f64>,
    pub rpe_rot: Option<f64>,
    pub abs_rel: Option<f64>,
    pub delta125: Option<f64>,
    pub coverage: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(reports: &[TrialReport]) -> Vec<LevelAggregate> {
    let mut by_level: BTreeMap<LevelName, Vec<&TrialReport>> = BTreeMap::new();
    for r in reports {
        by_level.entry(r.level.name).or_default().push(r);
    }
    by_level
        .into_values()
        .map(|mut rs| {
            rs.sort_by_key(|r| r.trial);
            let metric =
                |f: fn(&EvalSummary) -> Option<f64>| mean_of(rs.iter().map(|r| r.metrics.as_ref().and_then(f)));
            LevelAggregate {
                level: rs[0].level,
                n_trials: rs.len(),
                success_rate: mean_of(rs.iter().map(|r| Some(r.stats.success_rate))).unwrap_or(0.0),
                clean_retention: mean_of(rs.iter().map(|r| r.stats.clean_retention)),
                trials_with_metrics: rs.iter().filter(|r| r.metrics.is_some()).count(),
                ate: metric(|m| m.ate),
                rpe_trans: metric(|m| m.rpe_trans),
                rpe_rot: metric(|m| m.rpe_rot),
                abs_rel: metric(|m| m.abs_rel),
                delta125: metric(|m| m.delta125),
                coverage: metric(|m| Some(m.coverage)),
            }
        })
        .collect()
}

pub fn aggregate_to_csv(rows: &[LevelAggregate]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "noise_level",
        "n_clean",
        "n_noise",
        "n_trials",
        "success_rate",
        "clean_retention",
        "trials_with_metrics",
        "ATE",
        "RPE_trans",
        "RPE_rot",
        "AbsRel",
        "delta125",
        "coverage",
    ])
    .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.level.name.to_string(),
            r.level.n_clean.to_string(),
            r.level.n_noise.to_string(),
            r.n_trials.to_string(),
            r.success_rate.to_string(),
            opt(r.clean_retention),
            r.trials_with_metrics.to_string(),
            opt(r.ate),
            opt(r.rpe_trans),
            opt(r.rpe_rot),
            opt(r.abs_rel),
            opt(r.delta125),
            opt(r.coverage),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// JSON run description. Relative paths resolve against the spec file's directory.
///
/// ```json
/// {"manifest": "pool.json", "profile": "eth3d", "levels": ["small"],
///  "n_trials": 10, "base_seed": 0, "probe": "feature", "tau": 0.65,
///  "predictions": {"small/0": "pred/small_0.json"}}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub manifest: PathBuf,
    #[serde(default)]
    pub pools: Option<Pools>,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default = "all_levels")]
    pub levels: Vec<LevelName>,
    #[serde(default = "ten")]
    pub n_trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "feature_probe")]
    pub probe: Probe,
    #[serde(default)]
    pub mode: AttentionMode,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub predictions: BTreeMap<String, PathBuf>,
}

fn all_levels() -> Vec<LevelName> {
    LevelName::ALL.to_vec()
}
fn ten() -> usize {
    10
}
fn feature_probe() -> Probe {
    Probe::Feature
}

/// A run spec with its manifests loaded.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub pool: ViewManifest,
    pub pools: Pools,
    pub config: TrialConfig,
    pub predictions: Predictions,
}

fn parse_prediction_key(key: &str) -> Result<(LevelName, usize), ProtocolError> {
    let bad = || ProtocolError::InvalidSpec(format!("prediction key {key:?} is not <level>/<trial>"));
    let (l, t) = key.split_once('/').ok_or_else(bad)?;
    Ok((l.parse()?, t.parse().map_err(|_| bad())?))
}

impl RunSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProtocolError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ProtocolError::SpecIo {
            path: path.to_path_buf(),
            source,
        })?;
        let mut spec: RunSpec = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.manifest = base.join(&spec.manifest);
        for p in spec.predictions.values_mut() {
            *p = base.join(&*p);
        }
        Ok(spec)
    }

    pub fn config(&self) -> Result<TrialConfig, ProtocolError> {
        if self.alpha.is_some() && self.probe != Probe::Fused {
            return Err(ProtocolError::InvalidSpec(
                "alpha is only meaningful with probe \"fused\"".into(),
            ));
        }
        if self.n_trials == 0 || self.levels.is_empty() {
            return Err(ProtocolError::InvalidSpec(
                "need at least one level and one trial".into(),
            ));
        }
        let mut fusion = FusionConfig::default();
        if let Some(a) = self.alpha {
            fusion = FusionConfig::new(a, fusion.tau_agg).map_err(|e| ProtocolError::InvalidSpec(e.to_string()))?;
        }
        Ok(TrialConfig {
            profile: self.profile,
            levels: self.levels.clone(),
            n_trials: self.n_trials,
            base_seed: self.base_seed,
            score: ScoreOptions {
                probe: self.probe,
                mode: self.mode,
                fusion,
            },
            tau: self.tau.unwrap_or_else(|| Thresholds::default().for_probe(self.probe)),
        })
    }

    pub fn resolve(&self) -> Result<ResolvedRun, ProtocolError> {
        let config = self.config()?;
        let pool = ViewManifest::load(&self.manifest)?;
        let pools = self.pools.clone().unwrap_or_else(|| Pools::from_labels(&pool));
        let mut predictions = Predictions::new();
        for (key, path) in &self.predictions {
            predictions.insert(parse_prediction_key(key)?, ViewManifest::load(path)?);
        }
        Ok(ResolvedRun {
            pool,
            pools,
            config,
            predictions,
        })
    }
}
