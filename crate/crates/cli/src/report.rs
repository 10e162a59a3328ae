//! Uncertainty reports: rerun the pipeline under several seeds and summarise
//! the best-over-grid score of each run.
//!
//! - `algorithm`: five attribution-side seeds (model training and method
//!   randomness) against one fixed ground truth.
//! - `ground-truth`: one attribution-side seed against five ground-truth seeds.
//! - `none`: the configured seeds only.

use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use tda_core::metrics::{mean_stderr, MetricKind};
use tda_core::rng::derive_seed;
use tda_core::Error;

use crate::config::RunConfig;
use crate::pipeline::{Paths, Pipeline};
use crate::{CliError, Result};

/// Runs per uncertainty source.
pub const SEED_RUNS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Uncertainty {
    Algorithm,
    GroundTruth,
    None,
}

impl Uncertainty {
    pub fn as_str(self) -> &'static str {
        match self {
            Uncertainty::Algorithm => "algorithm",
            Uncertainty::GroundTruth => "ground-truth",
            Uncertainty::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// `run_{i}` or `mean`.
    pub run: String,
    pub metric: MetricKind,
    /// Best grid point of the run; empty on the mean row.
    pub grid_point: String,
    pub aggregate: f64,
    /// Per-test standard error on run rows; standard error over runs on the
    /// mean row.
    pub stderr: f64,
    pub seeds: Option<crate::config::Seeds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub uncertainty: Uncertainty,
    pub rows: Vec<ReportRow>,
}

impl Report {
    /// The mean row of `metric`, if any run produced it.
    pub fn mean(&self, metric: MetricKind) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.metric == metric && r.run == "mean")
    }
}

/// Configs of the runs behind a report.
pub fn variants(base: &RunConfig, mode: Uncertainty) -> Vec<RunConfig> {
    match mode {
        Uncertainty::None => vec![base.clone()],
        Uncertainty::Algorithm => (0..SEED_RUNS as u64)
            .map(|i| {
                let mut c = base.clone();
                c.seeds.train = derive_seed(base.seeds.train, "report/algorithm/train", i);
                c.seeds.method = derive_seed(base.seeds.method, "report/algorithm/method", i);
                c
            })
            .collect(),
        Uncertainty::GroundTruth => (0..SEED_RUNS as u64)
            .map(|i| {
                let mut c = base.clone();
                c.seeds.truth = derive_seed(base.seeds.truth, "report/ground-truth", i);
                c
            })
            .collect(),
    }
}

pub fn run_report(base: &RunConfig, mode: Uncertainty) -> Result<Report> {
    let root = base.output_dir.join("report").join(mode.as_str());
    let method = base.method.name.as_str().to_string();
    let mut per_run = Vec::new();
    for (i, mut cfg) in variants(base, mode).into_iter().enumerate() {
        cfg.output_dir = root.join(format!("run_{i}"));
        // Runs that share ground-truth seeds share the bundles.
        let truth_root = match mode {
            Uncertainty::GroundTruth => cfg.output_dir.join("truth"),
            _ => root.join("truth"),
        };
        let paths = Paths { root: cfg.output_dir.clone(), truth_root };
        log::info!("report {}: run {i}", mode.as_str());
        let seeds = cfg.seeds;
        let eval = Pipeline::with_paths(cfg, paths)?.evaluate()?;
        per_run.push((i, seeds, eval));
    }

    let mut rows = Vec::new();
    for metric in [MetricKind::Loo, MetricKind::Lds, MetricKind::Auc] {
        let runs: Vec<ReportRow> = per_run
            .iter()
            .filter_map(|(i, seeds, eval)| {
                eval.best.iter().find(|b| b.metric == metric).map(|b| ReportRow {
                    method: method.clone(),
                    run: format!("run_{i}"),
                    metric,
                    grid_point: b.grid_point.clone(),
                    aggregate: b.aggregate,
                    stderr: b.stderr,
                    seeds: Some(*seeds),
                })
            })
            .collect();
        if runs.is_empty() {
            continue;
        }
        if mode == Uncertainty::None {
            rows.extend(runs);
            continue;
        }
        let values: Vec<f64> = runs.iter().map(|r| r.aggregate).collect();
        let (mean, stderr) = mean_stderr(&values);
        rows.extend(runs);
        rows.push(ReportRow {
            method: method.clone(),
            run: "mean".into(),
            metric,
            grid_point: String::new(),
            aggregate: mean,
            stderr,
            seeds: None,
        });
    }
    let report = Report { uncertainty: mode, rows };
    write_report(&root, &report)?;
    Ok(report)
}

/// Writes `report.csv` and `report.json`, keeping rows of other methods
/// already reported into `dir`.
fn write_report(dir: &Path, report: &Report) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    let mut merged = Report { uncertainty: report.uncertainty, rows: Vec::new() };
    if json.exists() {
        let raw = std::fs::read(&json).map_err(|e| Error::io(&json, e))?;
        let old: Report = serde_json::from_slice(&raw)
            .map_err(|e| CliError::Core(Error::Format(format!("{}: {e}", json.display()))))?;
        let ours: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
        merged.rows.extend(old.rows.into_iter().filter(|r| !ours.contains(&r.method.as_str())));
    }
    merged.rows.extend(report.rows.iter().cloned());
    let report = &merged;
    let path = dir.join("report.csv");
    let err = |e: csv::Error| CliError::Core(Error::Format(format!("{}: {e}", path.display())));
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    w.write_record(["method", "run", "metric", "grid_point", "aggregate", "stderr"]).map_err(err)?;
    for r in &report.rows {
        w.write_record([
            r.method.clone(),
            r.run.clone(),
            r.metric.name().to_string(),
            r.grid_point.clone(),
            format!("{:.16e}", r.aggregate),
            format!("{:.16e}", r.stderr),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let bytes = serde_json::to_vec_pretty(report).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(&json, bytes).map_err(|e| Error::io(&json, e).into())
}
