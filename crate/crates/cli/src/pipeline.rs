//! The pipeline stages. Each stage makes sure the stages it depends on have
//! run, reusing on-disk artifacts whose recorded config hash still matches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tda_core::attrib::ScoreMatrix;
use tda_core::datasets::Dataset;
use tda_core::metrics::{lds, loo_correlation, noisy_label_auc, MetricKind, MetricReport};
use tda_core::modelzoo::{accuracy, load_checkpoint, save_checkpoint, train, CheckpointSet, Head, ModelSpec, TrainConfig};
use tda_core::rng::SeedRole;
use tda_core::truth::{
    generate_loo_with, generate_subsets_with, inject_label_noise, read_bundle, verify_bundle, write_bundle,
    RetrainOptions, TruthData,
};
use tda_core::Error;

use crate::config::{GridPoint, RunConfig};
use crate::grid::{grid, AttribContext};
use crate::{CliError, Result};

const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    Loo,
    Lds,
    Noisy,
}

impl TruthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TruthKind::Loo => "loo",
            TruthKind::Lds => "lds",
            TruthKind::Noisy => "noisy",
        }
    }
}

/// Where a run keeps its artifacts.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
    /// Ground-truth bundles live here; runs that share ground truth can share
    /// this directory.
    pub truth_root: PathBuf,
}

impl Paths {
    pub fn for_config(cfg: &RunConfig) -> Self {
        Paths { root: cfg.output_dir.clone(), truth_root: cfg.output_dir.join("truth") }
    }

    pub fn model_dir(&self, noisy: bool) -> PathBuf {
        self.root.join(if noisy { "model-noisy" } else { "model" })
    }

    pub fn truth_dir(&self, kind: TruthKind) -> PathBuf {
        self.truth_root.join(kind.as_str())
    }

    pub fn scores_dir(&self, method: &str) -> PathBuf {
        self.root.join("scores").join(method)
    }

    pub fn metrics_dir(&self, method: &str) -> PathBuf {
        self.root.join("metrics").join(method)
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    schema_version: u32,
    spec: ModelSpec,
    train: TrainConfig,
    config_hash: String,
    checkpoints: Vec<CheckpointEntry>,
    /// File name → SHA-256.
    files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEntry {
    file: String,
    epoch: usize,
    step_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Ok,
    Failed,
    Infeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointRecord {
    pub label: String,
    pub point: GridPoint,
    pub status: PointStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub seconds: f64,
    /// Whether a self-influence file was written.
    pub self_influence: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sweep {
    pub method: String,
    pub config_hash: String,
    pub budget_secs: f64,
    pub points: Vec<PointRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub grid_point: String,
    pub metric: MetricKind,
    pub aggregate: Option<f64>,
    pub stderr: Option<f64>,
    pub infeasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub metric: MetricKind,
    pub grid_point: String,
    pub hyperparams: GridPoint,
    pub aggregate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub method: String,
    pub rows: Vec<SummaryRow>,
    pub best: Vec<Best>,
}

fn file_sha(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(v).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())).into())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

/// Replaces `dir` by a freshly built `tmp`.
fn install_dir(tmp: &Path, dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(tmp, dir).map_err(|e| Error::io(dir, e).into())
}

fn staging(dir: &Path) -> Result<PathBuf> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    create_dir(&tmp)?;
    Ok(tmp)
}

pub fn write_self_influence(path: &Path, values: &[f64]) -> Result<()> {
    let err = |e: csv::Error| CliError::Core(Error::Format(format!("{}: {e}", path.display())));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["train_idx", "self_influence"]).map_err(err)?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:.16e}")]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e).into())
}

pub fn read_self_influence(path: &Path) -> Result<Vec<f64>> {
    let err = |e: csv::Error| CliError::Core(Error::Format(format!("{}: {e}", path.display())));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(err)?;
        let bad = || CliError::Core(Error::Format(format!("{}: malformed row {i}", path.display())));
        if rec.get(0).and_then(|s| s.parse::<usize>().ok()) != Some(i) {
            return Err(bad());
        }
        out.push(rec.get(1).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad)?);
    }
    Ok(out)
}

/// One benchmark run.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub paths: Paths,
    train: Arc<Dataset>,
    test: Arc<Dataset>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let paths = Paths::for_config(&cfg);
        Self::with_paths(cfg, paths)
    }

    pub fn with_paths(cfg: RunConfig, paths: Paths) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = cfg.load_data()?;
        if train.dim() != cfg.model.in_dim() || test.dim() != cfg.model.in_dim() {
            return Err(CliError::Config(format!(
                "model expects {} features, data has {} (train) and {} (test)",
                cfg.model.in_dim(),
                train.dim(),
                test.dim()
            )));
        }
        if train.n_classes().max(test.n_classes()) > cfg.model.n_classes() {
            return Err(CliError::Config(format!(
                "data has {} classes, model has {}",
                train.n_classes().max(test.n_classes()),
                cfg.model.n_classes()
            )));
        }
        create_dir(&paths.root)?;
        Ok(Pipeline { cfg, paths, train: Arc::new(train), test: Arc::new(test) })
    }

    pub fn train_data(&self) -> &Dataset {
        &self.train
    }

    pub fn test_data(&self) -> &Dataset {
        &self.test
    }

    /// Attribution-side training recipe.
    pub fn attribution_train_config(&self) -> TrainConfig {
        self.cfg.train.with_seed(SeedRole::Attribution.seed(self.cfg.seeds.train, 0))
    }

    fn noisy_train(&self) -> Result<Option<Dataset>> {
        match &self.cfg.truth.noisy {
            Some(n) => Ok(Some(inject_label_noise(&self.train, n.fraction, self.cfg.seeds.truth)?.1)),
            None => Ok(None),
        }
    }

    /// Trains the attribution model (and its corrupted-label twin when label
    /// noise is configured), or reuses matching checkpoints on disk.
    pub fn train(&self) -> Result<()> {
        self.ensure_model(false)?;
        if self.cfg.truth.noisy.is_some() {
            self.ensure_model(true)?;
        }
        Ok(())
    }

    fn ensure_model(&self, noisy: bool) -> Result<CheckpointSet> {
        let data = if noisy {
            self.noisy_train()?.ok_or_else(|| CliError::Config("label noise is not configured".into()))?
        } else {
            (*self.train).clone()
        };
        let dir = self.paths.model_dir(noisy);
        let hash = self.cfg.model_hash(&data);
        let spec = self.cfg.model;
        if dir.join("manifest.json").exists() {
            let man = self.verify_model(&dir)?;
            if man.config_hash == hash {
                log::info!("model in {} is up to date", dir.display());
                let checkpoints = man
                    .checkpoints
                    .iter()
                    .map(|c| Ok(load_checkpoint(&dir.join(&c.file))?.into_params_for(&spec)?))
                    .collect::<Result<Vec<_>>>()?;
                return Ok(CheckpointSet {
                    checkpoints,
                    step_sizes: man.checkpoints.iter().map(|c| c.step_size).collect(),
                    epochs: man.checkpoints.iter().map(|c| c.epoch).collect(),
                    seed: man.train.seed,
                });
            }
        }
        let cfg = self.attribution_train_config();
        log::info!("training {} model ({} points)", if noisy { "corrupted-label" } else { "attribution" }, data.len());
        let run = train(&spec, &data, &cfg)?;
        log::info!(
            "train accuracy {:.3}, test accuracy {:.3}",
            accuracy(&spec, run.final_params(), &data)?,
            accuracy(&spec, run.final_params(), &self.test)?
        );
        let tmp = staging(&dir)?;
        let mut entries = Vec::new();
        let mut files = BTreeMap::new();
        for ((params, &epoch), &step_size) in run.checkpoints.iter().zip(&run.epochs).zip(&run.step_sizes) {
            let file = format!("epoch_{epoch:04}.ckpt");
            let path = tmp.join(&file);
            save_checkpoint(&path, &spec, params)?;
            files.insert(file.clone(), file_sha(&path)?);
            entries.push(CheckpointEntry { file, epoch, step_size });
        }
        let man = ModelManifest {
            schema_version: MODEL_SCHEMA_VERSION,
            spec,
            train: cfg,
            config_hash: hash,
            checkpoints: entries,
            files,
        };
        write_json(&tmp.join("manifest.json"), &man)?;
        install_dir(&tmp, &dir)?;
        Ok(run)
    }

    fn verify_model(&self, dir: &Path) -> Result<ModelManifest> {
        let bad = |what: String| CliError::Core(Error::Integrity(format!("{}: {what}", dir.display())));
        let raw = std::fs::read(dir.join("manifest.json")).map_err(|e| bad(format!("cannot read manifest: {e}")))?;
        let man: ModelManifest = serde_json::from_slice(&raw).map_err(|e| bad(format!("corrupt manifest: {e}")))?;
        if man.schema_version != MODEL_SCHEMA_VERSION {
            return Err(bad(format!("schema version {} unsupported", man.schema_version)));
        }
        for (name, want) in &man.files {
            let got = file_sha(&dir.join(name)).map_err(|_| bad(format!("{name} missing")))?;
            if &got != want {
                return Err(bad(format!("{name} does not match its recorded hash")));
            }
        }
        if man.checkpoints.iter().any(|c| !man.files.contains_key(&c.file)) {
            return Err(bad("manifest lists an unhashed checkpoint".into()));
        }
        Ok(man)
    }

    pub fn truth_enabled(&self, kind: TruthKind) -> bool {
        match kind {
            TruthKind::Loo => self.cfg.truth.loo,
            TruthKind::Lds => self.cfg.truth.lds.is_some(),
            TruthKind::Noisy => self.cfg.truth.noisy.is_some(),
        }
    }

    /// Generates the ground-truth bundle of `kind`, or reuses it when its
    /// manifest matches this config. Returns the data and the number of
    /// retraining jobs run.
    pub fn truth(&self, kind: TruthKind) -> Result<(TruthData, usize)> {
        if !self.truth_enabled(kind) {
            return Err(CliError::Config(format!("truth.{} is not configured", kind.as_str())));
        }
        let dir = self.paths.truth_dir(kind);
        let hash = self.cfg.truth_hash(kind.as_str(), &self.train, &self.test);
        if dir.join("manifest.json").exists() {
            let man = verify_bundle(&dir)?;
            if man.config_hash == hash {
                log::info!("ground truth {} in {} is up to date; retraining jobs: 0", kind.as_str(), dir.display());
                return Ok((read_bundle(&dir)?.1, 0));
            }
            log::info!("ground truth {} in {} was generated from a different config", kind.as_str(), dir.display());
        }
        let tmp = staging(&dir)?;
        let opts = RetrainOptions { head: Head::Margin, checkpoint_dir: Some(tmp.clone()) };
        let spec = self.cfg.model;
        let (data, jobs) = match kind {
            TruthKind::Loo => {
                let cfg = self.cfg.train.with_seed(SeedRole::Truth.seed(self.cfg.seeds.truth, 0));
                let t = generate_loo_with(&spec, &self.train, &self.test, &cfg, &opts)?;
                (TruthData::Loo(t), self.train.len() + 1)
            }
            TruthKind::Lds => {
                let l = self.cfg.truth.lds.as_ref().expect("checked above");
                let cfg = self.cfg.train.with_seed(self.cfg.seeds.truth);
                let t = generate_subsets_with(&spec, &self.train, &self.test, l.m, l.alpha, &cfg, &opts)?;
                (TruthData::Subsets(t), l.m)
            }
            TruthKind::Noisy => {
                let n = self.cfg.truth.noisy.as_ref().expect("checked above");
                (TruthData::Noisy(inject_label_noise(&self.train, n.fraction, self.cfg.seeds.truth)?.0), 0)
            }
        };
        log::info!("ground truth {}: retraining jobs: {jobs}", kind.as_str());
        write_bundle(&tmp, &data, &spec, &hash)?;
        install_dir(&tmp, &dir)?;
        Ok((data, jobs))
    }

    /// Runs the method over its grid, one score file per grid point. Failing
    /// points are recorded and skipped; points over the time budget are
    /// marked infeasible.
    pub fn attribute(&self) -> Result<Sweep> {
        let method = self.cfg.method.name.as_str();
        let ctx = Arc::new(AttribContext::new(
            self.cfg.model,
            self.ensure_model(false)?,
            (*self.train).clone(),
            self.attribution_train_config(),
            self.cfg.seeds,
            self.cfg.method.clone(),
        ));
        let noisy = match self.noisy_train()? {
            Some(data) => Some(Arc::new(AttribContext::new(
                self.cfg.model,
                self.ensure_model(true)?,
                data,
                self.attribution_train_config(),
                self.cfg.seeds,
                self.cfg.method.clone(),
            ))),
            None => None,
        };
        let dir = self.paths.scores_dir(method);
        let tmp = staging(&dir)?;
        let budget = Duration::from_secs_f64(self.cfg.budget_secs);
        let mut points = Vec::new();
        for point in grid(&self.cfg.method) {
            let label = point.label();
            log::info!("{method} {label}");
            let start = Instant::now();
            let (tx, rx) = mpsc::channel();
            {
                let (ctx, noisy, point, test) = (ctx.clone(), noisy.clone(), point.clone(), self.test.clone());
                std::thread::spawn(move || {
                    let run = || -> Result<(ScoreMatrix, Option<Vec<f64>>)> {
                        let scores = ctx.build(&point)?.attribute(&ctx.train, &test)?;
                        let self_inf = match &noisy {
                            Some(n) => Some(n.build(&point)?.self_influence(&n.train)?),
                            None => None,
                        };
                        Ok((scores, self_inf))
                    };
                    let _ = tx.send(run());
                });
            }
            let outcome = rx.recv_timeout(budget);
            let seconds = start.elapsed().as_secs_f64();
            let mut rec = PointRecord {
                label: label.clone(),
                point: point.clone(),
                status: PointStatus::Ok,
                message: None,
                seconds,
                self_influence: false,
            };
            match outcome {
                Ok(Ok((scores, self_inf))) => {
                    scores.write(&tmp.join(format!("{label}.csv")))?;
                    if let Some(v) = self_inf {
                        write_self_influence(&tmp.join(format!("{label}.self.csv")), &v)?;
                        rec.self_influence = true;
                    }
                }
                Ok(Err(e)) => {
                    let infeasible = matches!(e, CliError::Core(Error::Unsupported(_)));
                    log::warn!("{method} {label} {}: {e}", if infeasible { "infeasible" } else { "failed" });
                    rec.status = if infeasible { PointStatus::Infeasible } else { PointStatus::Failed };
                    rec.message = Some(e.to_string());
                }
                Err(_) => {
                    log::warn!("{method} {label} exceeded the {:.0} s budget; marked infeasible", budget.as_secs_f64());
                    rec.status = PointStatus::Infeasible;
                    rec.message = Some(
                        Error::Timeout { elapsed_secs: seconds, cap_secs: budget.as_secs_f64() }.to_string(),
                    );
                }
            }
            points.push(rec);
        }
        let sweep = Sweep { method: method.to_string(), config_hash: self.sweep_hash(), budget_secs: self.cfg.budget_secs, points };
        write_json(&tmp.join("sweep.json"), &sweep)?;
        install_dir(&tmp, &dir)?;
        Ok(sweep)
    }

    fn sweep_hash(&self) -> String {
        self.cfg.sweep_hash(&self.train, &self.test)
    }

    fn sweep(&self) -> Result<Sweep> {
        let path = self.paths.scores_dir(self.cfg.method.name.as_str()).join("sweep.json");
        if path.exists() {
            let sweep: Sweep = read_json(&path)?;
            if sweep.config_hash == self.sweep_hash() {
                return Ok(sweep);
            }
            log::info!("scores in {} are stale; recomputing", path.parent().unwrap_or(&path).display());
        }
        self.attribute()
    }

    /// Scores every successful grid point against each configured kind of
    /// ground truth; writes one metric JSON per (grid point, metric), the
    /// best point per metric and `summary.csv`.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let kinds: Vec<TruthKind> =
            [TruthKind::Loo, TruthKind::Lds, TruthKind::Noisy].into_iter().filter(|&k| self.truth_enabled(k)).collect();
        if kinds.is_empty() {
            return Err(CliError::Config("no ground truth configured to evaluate against".into()));
        }
        let truths: Vec<(TruthKind, TruthData)> =
            kinds.iter().map(|&k| Ok((k, self.truth(k)?.0))).collect::<Result<_>>()?;
        let sweep = self.sweep()?;
        let method = sweep.method.clone();
        let scores_dir = self.paths.scores_dir(&method);
        let out = self.paths.metrics_dir(&method);
        create_dir(&out)?;
        let mut rows = Vec::new();
        let mut best: BTreeMap<MetricKind, Best> = BTreeMap::new();
        for rec in &sweep.points {
            for (kind, truth) in &truths {
                let metric = match kind {
                    TruthKind::Loo => MetricKind::Loo,
                    TruthKind::Lds => MetricKind::Lds,
                    TruthKind::Noisy => MetricKind::Auc,
                };
                if rec.status != PointStatus::Ok {
                    rows.push(SummaryRow {
                        method: method.clone(),
                        grid_point: rec.label.clone(),
                        metric,
                        aggregate: None,
                        stderr: None,
                        infeasible: true,
                    });
                    continue;
                }
                let report = self.metric(&scores_dir, rec, truth)?;
                write_json(&out.join(format!("{}.{}.json", rec.label, metric.name())), &report)?;
                rows.push(SummaryRow {
                    method: method.clone(),
                    grid_point: rec.label.clone(),
                    metric,
                    aggregate: Some(report.aggregate),
                    stderr: Some(report.stderr),
                    infeasible: false,
                });
                // ties keep the earlier grid point
                if best.get(&metric).is_none_or(|b| report.aggregate > b.aggregate) {
                    best.insert(
                        metric,
                        Best {
                            metric,
                            grid_point: rec.label.clone(),
                            hyperparams: rec.point.clone(),
                            aggregate: report.aggregate,
                            stderr: report.stderr,
                        },
                    );
                }
            }
        }
        let eval = Evaluation { method, rows, best: best.into_values().collect() };
        write_json(&out.join("best.json"), &eval.best)?;
        // Other methods evaluated into the same directory keep their rows.
        let path = self.paths.summary();
        let mut all: Vec<SummaryRow> = if path.exists() {
            read_summary(&path)?.into_iter().filter(|r| r.method != eval.method).collect()
        } else {
            Vec::new()
        };
        all.extend(eval.rows.iter().cloned());
        write_summary(&path, &all)?;
        Ok(eval)
    }

    fn metric(&self, scores_dir: &Path, rec: &PointRecord, truth: &TruthData) -> Result<MetricReport> {
        let mut report = match truth {
            TruthData::Loo(t) => loo_correlation(&ScoreMatrix::read(&scores_dir.join(format!("{}.csv", rec.label)))?, t)?,
            TruthData::Subsets(t) => lds(&ScoreMatrix::read(&scores_dir.join(format!("{}.csv", rec.label)))?, t)?,
            TruthData::Noisy(t) => {
                let path = scores_dir.join(format!("{}.self.csv", rec.label));
                noisy_label_auc(&read_self_influence(&path)?, t)?
            }
        };
        if let serde_json::Value::Object(m) = &mut report.config {
            m.insert("method".into(), serde_json::json!(self.cfg.method.name.as_str()));
            m.insert("grid_point".into(), serde_json::json!(rec.point));
            m.insert("seeds".into(), serde_json::json!(self.cfg.seeds));
        }
        Ok(report)
    }
}

pub const SUMMARY_HEADER: [&str; 6] = ["method", "grid_point", "metric", "aggregate", "stderr", "infeasible"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let err = |e: csv::Error| CliError::Core(Error::Format(format!("{}: {e}", path.display())));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().map(|row| row.map_err(err)).collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let err = |e: csv::Error| CliError::Core(Error::Format(format!("{}: {e}", path.display())));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(SUMMARY_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.grid_point.clone(),
            r.metric.name().to_string(),
            opt(r.aggregate),
            opt(r.stderr),
            r.infeasible.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e).into())
}
