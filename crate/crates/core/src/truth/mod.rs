//! Retraining-based ground truth.
//!
//! Every table here comes from training models from scratch: the full-data
//! model plus one model per removed point ([`generate_loo`]), one model per
//! random `⌊αn⌋`-subset ([`generate_subsets`]), and a corrupted-label copy of
//! the training set ([`inject_label_noise`]). Jobs run on the rayon pool and
//! results are ordered by job index, so serial and parallel runs agree bit
//! for bit.

mod bundle;

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::modelzoo::{sample_outputs, save_checkpoint, train, Head, ModelSpec, TrainConfig};
use crate::rng::{derive_seed, SeedRole, Stream};

pub use bundle::{read_bundle, verify_bundle, write_bundle, Manifest, TruthData, TruthKind, BUNDLE_SCHEMA_VERSION};

/// Leave-one-out retraining allowed without complaint.
pub const LOO_WARN_ABOVE: usize = 500;
/// Hard cap on leave-one-out retraining.
pub const LOO_MAX_TRAIN: usize = 2000;

/// Knobs shared by the retraining generators.
#[derive(Debug, Clone)]
pub struct RetrainOptions {
    /// Per-sample output recorded on the test set.
    pub head: Head,
    /// When set, every retrained model is saved there as `model_{job:05}.ckpt`
    /// (job 0 is the full-data model for leave-one-out).
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RetrainOptions {
    fn default() -> Self {
        RetrainOptions { head: Head::Margin, checkpoint_dir: None }
    }
}

/// Outputs of the full-data model and of each leave-one-out model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooTruth {
    pub n_train: usize,
    pub n_test: usize,
    pub base_outputs: Vec<f64>,
    /// Row-major `n_train × n_test`: row `j` is the model trained without `j`.
    pub loo_outputs: Vec<f64>,
    pub seed: u64,
    pub head: Head,
}

impl LooTruth {
    pub fn loo_output(&self, removed: usize, test: usize) -> f64 {
        self.loo_outputs[removed * self.n_test + test]
    }

    /// `f_{S∖j}(x_t) − f_S(x_t)` for every `j`.
    pub fn deltas(&self, test: usize) -> Vec<f64> {
        (0..self.n_train).map(|j| self.loo_output(j, test) - self.base_outputs[test]).collect()
    }
}

/// Outputs of models retrained on random subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetTruth {
    pub n_train: usize,
    pub n_test: usize,
    /// Ascending index sets, each of size `⌊αn⌋`.
    pub subsets: Vec<Vec<usize>>,
    /// Row-major `m × n_test`.
    pub outputs: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub head: Head,
}

impl SubsetTruth {
    pub fn m(&self) -> usize {
        self.subsets.len()
    }

    pub fn output(&self, subset: usize, test: usize) -> f64 {
        self.outputs[subset * self.n_test + test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyTruth {
    pub flipped: Vec<bool>,
    pub original_labels: Vec<usize>,
    pub corrupted_labels: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

impl NoisyTruth {
    pub fn flipped_count(&self) -> usize {
        self.flipped.iter().filter(|&&f| f).count()
    }
}

/// One retraining: which rows to keep and which seed to train with.
struct Job {
    rows: Vec<usize>,
    seed: u64,
}

fn run_jobs(
    spec: &ModelSpec,
    train_data: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    opts: &RetrainOptions,
    jobs: &[Job],
    name: impl Fn(usize) -> String + Sync,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    cfg.validate()?;
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    log::info!("retraining {} models", jobs.len());
    jobs.par_iter()
        .enumerate()
        .map(|(k, job)| {
            let data = train_data.select(&job.rows);
            let job_cfg = TrainConfig { seed: job.seed, checkpoint_epochs: Vec::new(), ..cfg.clone() };
            let run = train(spec, &data, &job_cfg).map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("{}: {msg}", name(k))),
                other => other,
            })?;
            let params = run.final_params();
            if let Some(dir) = &opts.checkpoint_dir {
                save_checkpoint(&dir.join(format!("model_{k:05}.ckpt")), spec, params)?;
            }
            let out = sample_outputs(spec, params, test, opts.head)?;
            if let Some(t) = out.iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("{}: non-finite output on test point {t}", name(k))));
            }
            Ok(out)
        })
        .collect::<Vec<Result<_>>>()
        // the reported failure is the lowest job index, whatever finished first
        .into_iter()
        .collect()
}

pub fn generate_loo(spec: &ModelSpec, train_data: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<LooTruth> {
    generate_loo_with(spec, train_data, test, cfg, &RetrainOptions::default())
}

/// Full-data model plus `n` leave-one-out models, all trained with
/// `cfg.seed`, so the removed point is the only thing that varies.
pub fn generate_loo_with(
    spec: &ModelSpec,
    train_data: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    opts: &RetrainOptions,
) -> Result<LooTruth> {
    let n = train_data.len();
    if n > LOO_MAX_TRAIN {
        return Err(Error::Config(format!("leave-one-out over {n} points exceeds the cap of {LOO_MAX_TRAIN}")));
    }
    if n < 2 {
        return Err(Error::Config("leave-one-out needs at least 2 training points".into()));
    }
    if n > LOO_WARN_ABOVE {
        log::warn!("leave-one-out over {n} points means {} retrainings", n + 1);
    }
    let all: Vec<usize> = (0..n).collect();
    let jobs: Vec<Job> = std::iter::once(Job { rows: all.clone(), seed: cfg.seed })
        .chain((0..n).map(|j| Job { rows: [&all[..j], &all[j + 1..]].concat(), seed: cfg.seed }))
        .collect();
    let name = |k: usize| if k == 0 { "full-data model".to_string() } else { format!("model without training point {}", k - 1) };
    let mut outs = run_jobs(spec, train_data, test, cfg, opts, &jobs, name)?.into_iter();
    let base_outputs = outs.next().unwrap_or_default();
    Ok(LooTruth {
        n_train: n,
        n_test: test.len(),
        base_outputs,
        loo_outputs: outs.flatten().collect(),
        seed: cfg.seed,
        head: opts.head,
    })
}

pub fn subset_size(n: usize, alpha: f64) -> usize {
    (alpha * n as f64).floor() as usize
}

/// 64-bit digest of an index set.
pub fn subset_hash(rows: &[usize]) -> u64 {
    let mut h = Sha256::new();
    for &r in rows {
        h.update((r as u64).to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// The `m` index sets [`generate_subsets`] trains on, drawn from the
/// ground-truth seed stream.
pub fn sample_subsets(n: usize, m: usize, alpha: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if m < 2 {
        return Err(Error::Config(format!("need m ≥ 2 subsets, got {m}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("subset fraction {alpha} not in (0, 1)")));
    }
    let k = subset_size(n, alpha);
    if k == 0 {
        return Err(Error::Config(format!("⌊{alpha}·{n}⌋ = 0 leaves nothing to train on")));
    }
    Ok((0..m as u64)
        .map(|j| Stream::new(SeedRole::Truth.seed(seed, j), "truth/subset").choose_sorted(n, k))
        .collect())
}

pub fn generate_subsets(
    spec: &ModelSpec,
    train_data: &Dataset,
    test: &Dataset,
    m: usize,
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<SubsetTruth> {
    generate_subsets_with(spec, train_data, test, m, alpha, cfg, &RetrainOptions::default())
}

/// `m` models, each trained on `⌊αn⌋` points drawn without replacement.
/// Subset `j` trains with a seed derived from `(cfg.seed, hash of its
/// indices)` on the ground-truth side of the seed split.
pub fn generate_subsets_with(
    spec: &ModelSpec,
    train_data: &Dataset,
    test: &Dataset,
    m: usize,
    alpha: f64,
    cfg: &TrainConfig,
    opts: &RetrainOptions,
) -> Result<SubsetTruth> {
    let subsets = sample_subsets(train_data.len(), m, alpha, cfg.seed)?;
    let jobs: Vec<Job> = subsets
        .iter()
        .map(|rows| Job {
            rows: rows.clone(),
            seed: derive_seed(SeedRole::Truth.seed(cfg.seed, 0), "truth/subset-train", subset_hash(rows)),
        })
        .collect();
    let outs = run_jobs(spec, train_data, test, cfg, opts, &jobs, |k| format!("model on subset {k}"))?;
    Ok(SubsetTruth {
        n_train: train_data.len(),
        n_test: test.len(),
        subsets,
        outputs: outs.into_iter().flatten().collect(),
        alpha,
        seed: cfg.seed,
        head: opts.head,
    })
}

/// Flips `⌊fraction·n⌋` uniformly chosen labels, each to a class drawn
/// uniformly from the other `C − 1`.
pub fn inject_label_noise(data: &Dataset, fraction: f64, seed: u64) -> Result<(NoisyTruth, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("noise fraction {fraction} not in (0, 1)")));
    }
    let c = data.n_classes();
    if c < 2 {
        return Err(Error::Config("label noise needs at least 2 classes".into()));
    }
    let n = data.len();
    let k = (fraction * n as f64).floor() as usize;
    let mut rng = Stream::new(SeedRole::Truth.seed(seed, 0), "truth/noise");
    let chosen = rng.choose_sorted(n, k);
    let original = data.labels().to_vec();
    let mut corrupted = original.clone();
    let mut flipped = vec![false; n];
    for &i in &chosen {
        let r = rng.below(c - 1);
        corrupted[i] = if r < original[i] { r } else { r + 1 };
        flipped[i] = true;
    }
    let noisy = data.with_labels(corrupted.clone())?;
    Ok((NoisyTruth { flipped, original_labels: original, corrupted_labels: corrupted, fraction, seed }, noisy))
}
