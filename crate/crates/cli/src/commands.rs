use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use viewsift_core::evalmetrics::{evaluate_predictions, metric_rows_to_csv, MetricRow};
use viewsift_core::probe::{best_layer, layer_gap_curve};
use viewsift_core::protocol::{aggregate, aggregate_to_csv, run_trials, LevelName, Profile, RunSpec, TrialConfig};
use viewsift_core::scoring::{score_matrix, score_row, AttentionMode, Probe, ScoreOptions};
use viewsift_core::selection::{select_views, selection_report, FusionConfig, Thresholds};
use viewsift_core::synth::{attach_ground_truth, gen_full_set, SynthSpec};
use viewsift_core::tensorstore::ViewManifest;

use crate::args::{Command, EvalArgs, MethodArgs, ProbeArgs, ScoreArgs, SelectArgs, SynthArgs, TrialsArgs};

/// Depth map size used for synthetic ground truth.
const SYNTH_DEPTH_HW: (usize, usize) = (6, 8);

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] viewsift_core::Error),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn from_clap(e: &clap::Error) -> Self {
        let text = e.to_string();
        let first = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .unwrap_or("invalid arguments");
        CliError::Usage(first.trim_start_matches("error: ").to_string())
    }
}

fn core<E: Into<viewsift_core::Error>>(e: E) -> CliError {
    CliError::Core(e.into())
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(&path, contents).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<PathBuf, CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    write(path, &text)
}

/// Writes `<stem>.csv` and its `<stem>.meta.json` config record.
fn write_csv(out: &Path, stem: &str, csv: &str, meta: serde_json::Value) -> Result<Vec<PathBuf>, CliError> {
    Ok(vec![
        write(out.join(format!("{stem}.csv")), csv)?,
        write_json(out.join(format!("{stem}.meta.json")), &meta)?,
    ])
}

fn score_options(m: &MethodArgs) -> Result<ScoreOptions, CliError> {
    let probe = Probe::from(m.probe);
    let mut fusion = FusionConfig::default();
    if let Some(alpha) = m.alpha {
        if probe != Probe::Fused {
            return Err(CliError::Usage(format!(
                "--alpha requires --probe fused, got --probe {probe}"
            )));
        }
        fusion = FusionConfig::new(alpha, fusion.tau_agg).map_err(core)?;
    }
    Ok(ScoreOptions {
        probe,
        mode: m.mode.into(),
        fusion,
    })
}

fn mode_label(opts: &ScoreOptions) -> Option<AttentionMode> {
    (opts.probe != Probe::Feature).then_some(opts.mode)
}

fn alpha_label(opts: &ScoreOptions) -> Option<f64> {
    (opts.probe == Probe::Fused).then_some(opts.fusion.alpha)
}

fn load(path: &Path) -> Result<ViewManifest, CliError> {
    ViewManifest::load(path).map_err(core)
}

/// Runs one subcommand and returns the files it wrote.
pub fn run(command: Command) -> Result<Vec<PathBuf>, CliError> {
    match command {
        Command::Score(a) => score(a),
        Command::Select(a) => select(a),
        Command::Probe(a) => probe(a),
        Command::Eval(a) => eval(a),
        Command::Trials(a) => trials(a),
        Command::Synth(a) => synth(a),
    }
}

fn score(a: ScoreArgs) -> Result<Vec<PathBuf>, CliError> {
    let opts = score_options(&a.method)?;
    let m = load(&a.manifest)?;
    let anchors = (!a.anchor.is_empty()).then_some(a.anchor.as_slice());
    let matrix = score_matrix(&m, &opts, anchors).map_err(core)?;
    let meta = json!({
        "command": "score",
        "manifest": a.manifest,
        "score": matrix.metadata(&opts),
    });
    write_csv(&a.out, "scores", &matrix.to_csv(), meta)
}

fn select(a: SelectArgs) -> Result<Vec<PathBuf>, CliError> {
    let opts = score_options(&a.method)?;
    let tau = a.tau.unwrap_or_else(|| Thresholds::default().for_probe(opts.probe));
    let m = load(&a.manifest)?;
    let anchor = match a.anchor {
        Some(id) => id,
        None => m
            .views
            .first()
            .map(|v| v.view_id.clone())
            .ok_or_else(|| CliError::Usage("manifest has no views".into()))?,
    };
    let row = score_row(&m, &anchor, &opts).map_err(core)?;
    let sel = select_views(&row, tau, opts.probe).map_err(core)?;
    let report = selection_report(&sel, &m);
    let doc = json!({
        "config": {
            "command": "select",
            "manifest": a.manifest,
            "set_id": m.set_id,
            "layer": m.layer_of_interest,
            "probe": opts.probe,
            "mode": mode_label(&opts),
            "alpha": alpha_label(&opts),
            "tau": tau,
            "anchor": anchor,
        },
        "counts": report.counts,
        "selection": report.selection,
    });
    Ok(vec![
        write_json(a.out.join("selection.json"), &doc)?,
        write_json(a.out.join("work_order.json"), &report.work_order)?,
    ])
}

fn probe(a: ProbeArgs) -> Result<Vec<PathBuf>, CliError> {
    let manifests = a.manifest.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let (probe, mode) = (Probe::from(a.probe), AttentionMode::from(a.mode));
    let curve = layer_gap_curve(&manifests, probe, mode, a.anchor.as_deref()).map_err(core)?;
    let best = best_layer(&curve).map_err(core)?;
    let meta = json!({
        "command": "probe",
        "manifests": a.manifest,
        "probe": probe,
        "mode": (probe != Probe::Feature).then_some(mode),
        "anchor": a.anchor,
        "best_layer": best,
    });
    write_csv(&a.out, "layer_gap", &curve.to_csv(), meta)
}

fn eval(a: EvalArgs) -> Result<Vec<PathBuf>, CliError> {
    let gt = load(&a.manifest)?;
    let mut rows = Vec::with_capacity(a.predictions.len());
    for path in &a.predictions {
        let pred = load(path)?;
        let summary = evaluate_predictions(&pred, &gt).map_err(core)?;
        rows.push(MetricRow {
            set_id: pred.set_id,
            trial: None,
            noise_level: None,
            method: a.method.clone(),
            summary,
        });
    }
    let meta = json!({
        "command": "eval",
        "ground_truth": a.manifest,
        "predictions": a.predictions,
        "method": a.method,
    });
    write_csv(&a.out, "metrics", &metric_rows_to_csv(&rows), meta)
}

fn trials(a: TrialsArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut spec = match (&a.run_spec, &a.manifest) {
        (Some(path), _) => RunSpec::load(path).map_err(core)?,
        (None, Some(manifest)) => RunSpec {
            manifest: manifest.clone(),
            pools: None,
            profile: Profile::Default,
            levels: LevelName::ALL.to_vec(),
            n_trials: TrialConfig::default().n_trials,
            base_seed: 0,
            probe: Probe::Feature,
            mode: AttentionMode::default(),
            tau: None,
            alpha: None,
            predictions: Default::default(),
        },
        (None, None) => return Err(CliError::Usage("trials needs --run-spec or --manifest".into())),
    };
    if let (Some(_), Some(manifest)) = (&a.run_spec, &a.manifest) {
        spec.manifest = manifest.clone();
    }
    if let Some(p) = a.profile {
        spec.profile = p.into();
    }
    if !a.level.is_empty() {
        spec.levels = a.level.iter().map(|&l| l.into()).collect();
    }
    if let Some(n) = a.trials {
        spec.n_trials = n;
    }
    if let Some(s) = a.seed {
        spec.base_seed = s;
    }
    if let Some(p) = a.probe {
        if spec.probe != p.into() {
            // A threshold from the spec belongs to its own probe.
            spec.tau = None;
        }
        spec.probe = p.into();
    }
    if let Some(m) = a.mode {
        spec.mode = m.into();
    }
    if a.tau.is_some() {
        spec.tau = a.tau;
    }
    if a.alpha.is_some() {
        spec.alpha = a.alpha;
    }
    if spec.alpha.is_some() && spec.probe != Probe::Fused {
        return Err(CliError::Usage(format!(
            "--alpha requires --probe fused, got --probe {}",
            spec.probe
        )));
    }

    let run = spec.resolve().map_err(core)?;
    let reports = run_trials(&run.pool, &run.pools, &run.config, &run.predictions).map_err(core)?;
    let mut written = Vec::with_capacity(reports.len() + 4);
    for r in &reports {
        let name = format!("trials/{}_{:03}.json", r.level.name, r.trial);
        written.push(write(a.out.join(name), &(r.to_json() + "\n"))?);
    }
    let cfg = &run.config;
    let meta = json!({
        "command": "trials",
        "manifest": spec.manifest,
        "config": cfg,
        "method": cfg.method(),
    });
    written.extend(write_csv(
        &a.out,
        "summary",
        &aggregate_to_csv(&aggregate(&reports)),
        meta.clone(),
    )?);
    let rows: Vec<MetricRow> = reports.iter().filter_map(|r| r.metric_row(&cfg.method())).collect();
    if !rows.is_empty() {
        written.extend(write_csv(&a.out, "metrics", &metric_rows_to_csv(&rows), meta)?);
    }
    Ok(written)
}

fn synth(a: SynthArgs) -> Result<Vec<PathBuf>, CliError> {
    let spec = SynthSpec {
        n_clean: a.clean,
        n_distractor: a.distractors,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let (mut m, oracle) = gen_full_set(&spec).map_err(core)?;
    let pred = if a.ground_truth {
        Some(attach_ground_truth(&mut m, a.seed, SYNTH_DEPTH_HW).map_err(core)?)
    } else {
        None
    };
    let manifest_path = a.out.join("manifest.json");
    m.save(&manifest_path).map_err(core)?;
    let mut written = vec![manifest_path];
    written.push(write_json(
        a.out.join("oracle.json"),
        &json!({"spec": spec, "attention": oracle}),
    )?);
    if let Some(pred) = pred {
        let path = a.out.join("predictions/manifest.json");
        pred.save(&path).map_err(core)?;
        written.push(path);
    }
    Ok(written)
}
