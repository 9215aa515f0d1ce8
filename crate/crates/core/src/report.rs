//! Experiment plans, bounded parallel execution and result files.
//!
//! A run directory holds:
//!
//! - `config.toml`: the resolved config (loadable again for replay)
//! - `trace.csv`: one row per round per trial
//! - `trials.csv`: one row per trial
//! - `summary.csv`: axis value x method, mean and std of window accuracy
//! - `summary.json`: the same plus the resolved config, seeds and failures
//!
//! Every file carries [`SCHEMA_VERSION`] and the config digest. Numbers are
//! written in shortest round-trip form, so identical runs give identical
//! bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Method, Seeds, SweepAxis};
use crate::dataset::Dataset;
use crate::engine::{self, mean_std, TrialResult};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.toml";
pub const TRACE_FILE: &str = "trace.csv";
pub const TRIALS_FILE: &str = "trials.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// One (axis value, method) cell of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanPoint {
    pub value: Option<f64>,
    pub method: Method,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub base: ExperimentConfig,
    pub axis: Option<SweepAxis>,
    pub points: Vec<PlanPoint>,
}

impl Plan {
    /// The base config alone, as its own single point.
    pub fn single(base: &ExperimentConfig) -> Result<Self> {
        base.validate()?;
        let mut cfg = base.clone();
        cfg.sweep = None;
        Ok(Self {
            base: cfg.clone(),
            axis: None,
            points: vec![PlanPoint {
                value: None,
                method: cfg.method(),
                config: cfg,
            }],
        })
    }

    /// Every value crossed with every method, values outermost.
    pub fn sweep(base: &ExperimentConfig) -> Result<Self> {
        base.validate()?;
        let spec = base
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [sweep] table".into()))?;
        let points = spec
            .values
            .iter()
            .flat_map(|v| {
                spec.methods.iter().map(move |&m| PlanPoint {
                    value: Some(v.0),
                    method: m,
                    config: spec.point(base, v.0, m),
                })
            })
            .collect();
        Ok(Self {
            base: base.clone(),
            axis: Some(spec.axis),
            points,
        })
    }

    pub fn job_count(&self) -> usize {
        self.points.iter().map(|p| p.config.trials).sum()
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        self.points
            .iter()
            .try_for_each(|p| engine::check_dataset(&p.config, dataset))
    }

    /// Human-readable listing of what [`execute`] would run.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let axis = self.axis.map_or("-", |a| a.name());
        writeln!(out, "schema_version: {SCHEMA_VERSION}").unwrap();
        writeln!(out, "config_sha256: {}", config_digest(&self.base)).unwrap();
        writeln!(out, "dataset: {}", self.base.dataset.display()).unwrap();
        writeln!(out, "axis: {axis}").unwrap();
        writeln!(
            out,
            "points: {}  trials: {}",
            self.points.len(),
            self.job_count()
        )
        .unwrap();
        for p in &self.points {
            writeln!(
                out,
                "  {} = {}  {}  x{}",
                axis,
                fmt_value(p.value),
                p.method,
                p.config.trials
            )
            .unwrap();
        }
        writeln!(
            out,
            "files: {CONFIG_FILE} {TRACE_FILE} {TRIALS_FILE} {SUMMARY_CSV} {SUMMARY_JSON}"
        )
        .unwrap();
        writeln!(out, "--- resolved config ---").unwrap();
        out.push_str(&self.base.to_toml());
        out
    }
}

/// First 16 hex digits of the SHA-256 of the resolved config TOML.
pub fn config_digest(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or(String::new(), fmt_f64)
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v}")
    }
}

/// Outcome of one trial job.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub point: usize,
    pub trial: usize,
    pub result: std::result::Result<TrialResult, String>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub plan: Plan,
    /// In plan order: points, then trials.
    pub trials: Vec<TrialOutcome>,
}

impl Outcome {
    pub fn failures(&self) -> impl Iterator<Item = &TrialOutcome> {
        self.trials.iter().filter(|t| t.result.is_err())
    }

    pub fn is_complete(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn point_trials(&self, point: usize) -> impl Iterator<Item = &TrialResult> {
        self.trials
            .iter()
            .filter(move |t| t.point == point)
            .filter_map(|t| t.result.as_ref().ok())
    }

    /// `(mean, std, successful trials)` of window accuracy at `point`.
    pub fn point_summary(&self, point: usize) -> (f64, f64, usize) {
        let acc: Vec<f64> = self
            .point_trials(point)
            .map(|t| t.window_accuracy)
            .collect();
        if acc.is_empty() {
            return (f64::NAN, f64::NAN, 0);
        }
        let (m, s) = mean_std(&acc);
        (m, s, acc.len())
    }
}

/// Runs every trial of `plan` on a pool of `workers` threads. Trial
/// failures are recorded, not propagated.
pub fn execute(plan: &Plan, dataset: &Dataset, workers: usize) -> Result<Outcome> {
    plan.check_dataset(dataset)?;
    let jobs: Vec<(usize, usize)> = plan
        .points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.config.trials).map(move |t| (i, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let trials = pool.install(|| {
        jobs.par_iter()
            .map(|&(point, trial)| {
                let result = engine::run_trial(&plan.points[point].config, dataset, trial)
                    .map_err(|e| e.to_string());
                if let Err(e) = &result {
                    log::error!("{} trial {trial} failed: {e}", plan.points[point].method);
                }
                TrialOutcome {
                    point,
                    trial,
                    result,
                }
            })
            .collect()
    });
    Ok(Outcome {
        plan: plan.clone(),
        trials,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

pub const TRACE_HEADER: [&str; 22] = [
    "schema_version",
    "config_sha256",
    "axis",
    "value",
    "method",
    "trial",
    "seed_partition",
    "seed_resources",
    "seed_training",
    "seed_fluctuation",
    "round",
    "start_s",
    "end_s",
    "estimated_end_s",
    "candidates",
    "selected",
    "upload_window_s",
    "uploaded_items",
    "server_samples",
    "server_per_class",
    "accuracy",
    "cumulative_cv",
];

fn seed_fields(s: &Seeds) -> [String; 4] {
    [
        s.partition.to_string(),
        s.resources.to_string(),
        s.training.to_string(),
        s.fluctuation.to_string(),
    ]
}

fn write_trace(outcome: &Outcome, digest: &str, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(TRACE_HEADER)?;
    let axis = outcome.plan.axis.map_or("", |a| a.name());
    for t in &outcome.trials {
        let Ok(res) = &t.result else { continue };
        let p = &outcome.plan.points[t.point];
        for r in &res.records {
            let mut row = vec![
                SCHEMA_VERSION.to_string(),
                digest.to_string(),
                axis.to_string(),
                fmt_value(p.value),
                p.method.label(),
                t.trial.to_string(),
            ];
            row.extend(seed_fields(&res.seeds));
            row.extend([
                r.round.to_string(),
                fmt_f64(r.start_s),
                fmt_f64(r.end_s),
                fmt_f64(r.estimated_end_s),
                r.candidates.len().to_string(),
                join(&r.selected),
                fmt_f64(r.upload_window_s),
                r.uploaded_items.to_string(),
                r.server_per_class.total().to_string(),
                r.server_per_class.to_string(),
                fmt_f64(r.accuracy),
                fmt_f64(r.cumulative_cv),
            ]);
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_trials(outcome: &Outcome, digest: &str, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "schema_version",
        "config_sha256",
        "axis",
        "value",
        "method",
        "trial",
        "seed_partition",
        "seed_resources",
        "seed_training",
        "seed_fluctuation",
        "status",
        "rounds",
        "elapsed_min",
        "window_acc",
        "final_acc",
        "server_samples",
    ])?;
    let axis = outcome.plan.axis.map_or("", |a| a.name());
    for t in &outcome.trials {
        let p = &outcome.plan.points[t.point];
        let mut row = vec![
            SCHEMA_VERSION.to_string(),
            digest.to_string(),
            axis.to_string(),
            fmt_value(p.value),
            p.method.label(),
            t.trial.to_string(),
        ];
        match &t.result {
            Ok(res) => {
                row.extend(seed_fields(&res.seeds));
                let elapsed = res.records.last().map_or(0.0, |r| r.end_s / 60.0);
                row.extend([
                    "ok".to_string(),
                    res.records.len().to_string(),
                    fmt_f64(elapsed),
                    fmt_f64(res.window_accuracy),
                    fmt_f64(res.final_accuracy),
                    res.server_samples.to_string(),
                ]);
            }
            Err(_) => {
                row.extend(seed_fields(&p.config.seeds.for_trial(t.trial)));
                row.extend([
                    "failed".to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_summary_csv(outcome: &Outcome, digest: &str, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec![];
    if let Some(axis) = outcome.plan.axis {
        header.push(axis.name());
    }
    header.extend([
        "method",
        "mean_acc",
        "std_acc",
        "trials",
        "schema_version",
        "config_sha256",
    ]);
    w.write_record(&header)?;
    for (i, p) in outcome.plan.points.iter().enumerate() {
        let (mean, std, n) = outcome.point_summary(i);
        let mut row = vec![];
        if outcome.plan.axis.is_some() {
            row.push(fmt_value(p.value));
        }
        row.extend([
            p.method.label(),
            fmt_f64(mean),
            fmt_f64(std),
            n.to_string(),
            SCHEMA_VERSION.to_string(),
            digest.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct JsonTrial {
    trial: usize,
    seeds: Seeds,
    rounds: usize,
    elapsed_min: f64,
    window_acc: f64,
    final_acc: f64,
    server_samples: usize,
}

#[derive(Serialize)]
struct JsonPoint {
    value: Option<f64>,
    method: String,
    mean_acc: Option<f64>,
    std_acc: Option<f64>,
    trials: usize,
    per_trial: Vec<JsonTrial>,
}

#[derive(Serialize)]
struct JsonFailure {
    value: Option<f64>,
    method: String,
    trial: usize,
    seeds: Seeds,
    error: String,
}

#[derive(Serialize)]
struct JsonSummary<'a> {
    schema_version: u32,
    status: &'static str,
    config_sha256: &'a str,
    axis: Option<&'static str>,
    time_unit: &'static str,
    config: &'a ExperimentConfig,
    points: Vec<JsonPoint>,
    failures: Vec<JsonFailure>,
}

/// JSON has no infinities; non-finite summary values become `null`.
fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn write_summary_json(outcome: &Outcome, digest: &str, path: &Path) -> Result<()> {
    let plan = &outcome.plan;
    let points = plan
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (mean, std, n) = outcome.point_summary(i);
            JsonPoint {
                value: p.value,
                method: p.method.label(),
                mean_acc: finite(mean),
                std_acc: finite(std),
                trials: n,
                per_trial: outcome
                    .point_trials(i)
                    .map(|t| JsonTrial {
                        trial: t.trial,
                        seeds: t.seeds,
                        rounds: t.records.len(),
                        elapsed_min: t.records.last().map_or(0.0, |r| r.end_s / 60.0),
                        window_acc: t.window_accuracy,
                        final_acc: t.final_accuracy,
                        server_samples: t.server_samples,
                    })
                    .collect(),
            }
        })
        .collect();
    let failures = outcome
        .failures()
        .map(|t| {
            let p = &plan.points[t.point];
            JsonFailure {
                value: p.value,
                method: p.method.label(),
                trial: t.trial,
                seeds: p.config.seeds.for_trial(t.trial),
                error: t.result.as_ref().err().cloned().unwrap_or_default(),
            }
        })
        .collect();
    let summary = JsonSummary {
        schema_version: SCHEMA_VERSION,
        status: if outcome.is_complete() {
            "complete"
        } else {
            "partial"
        },
        config_sha256: digest,
        axis: plan.axis.map(|a| a.name()),
        time_unit: "minutes",
        config: &plan.base,
        points,
        failures,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every result file into `dir` (created if missing) and returns
/// their paths.
pub fn write_outputs(outcome: &Outcome, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let digest = config_digest(&outcome.plan.base);
    let config = dir.join(CONFIG_FILE);
    let text = format!(
        "# schema_version = {SCHEMA_VERSION}\n# config_sha256 = {digest}\n{}",
        outcome.plan.base.to_toml()
    );
    fs::write(&config, text).map_err(|e| Error::io(&config, e))?;
    let files = [
        config,
        dir.join(TRACE_FILE),
        dir.join(TRIALS_FILE),
        dir.join(SUMMARY_CSV),
        dir.join(SUMMARY_JSON),
    ];
    write_trace(outcome, &digest, &files[1])?;
    write_trials(outcome, &digest, &files[2])?;
    write_summary_csv(outcome, &digest, &files[3])?;
    write_summary_json(outcome, &digest, &files[4])?;
    Ok(files.to_vec())
}
