//! The run configuration: one JSON file is the unit of record for a
//! benchmark run. Unknown keys are rejected; [`RunConfig::validate`] checks
//! everything serde cannot.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tda_core::attrib::EnsembleMode;
use tda_core::datasets::{parse_idx, synth_blobs, Dataset, SubsetSampler};
use tda_core::diffops::Distribution;
use tda_core::modelzoo::{Head, ModelSpec, TrainConfig};

use crate::CliError;

/// Wall-clock cap per grid point when the config does not set one.
pub const DEFAULT_BUDGET_SECS: f64 = 900.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub train: TrainSection,
    pub method: MethodConfig,
    #[serde(default)]
    pub truth: TruthSection,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    /// Wall-clock cap per grid point in seconds; slower points are marked
    /// infeasible.
    #[serde(default = "default_budget")]
    pub budget_secs: f64,
}

fn default_budget() -> f64 {
    DEFAULT_BUDGET_SECS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: Source,
    /// Where test points come from; defaults to `source`.
    #[serde(default)]
    pub test_source: Option<Source>,
    pub train: SubsetSampler,
    pub test: SubsetSampler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// Seeded Gaussian blobs.
    Synthetic { n: usize, dim: usize, n_classes: usize, separation: f64, seed: u64 },
    /// MNIST-style IDX image and label files.
    Idx { images: PathBuf, labels: PathBuf },
}

impl Source {
    pub fn load(&self) -> Result<Dataset, CliError> {
        match self {
            Source::Synthetic { n, dim, n_classes, separation, seed } => {
                Ok(synth_blobs(*n, *dim, *n_classes, *separation, *seed)?)
            }
            Source::Idx { images, labels } => {
                for p in [images, labels] {
                    if !p.is_file() {
                        return Err(CliError::Config(format!("dataset file {} does not exist", p.display())));
                    }
                }
                // Malformed input data is a configuration problem, not a crash.
                parse_idx(images, labels).map_err(|e| CliError::Config(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Extra epochs to checkpoint at (TracInCP sums over them).
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            checkpoint_epochs: self.checkpoint_epochs.clone(),
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    IfExplicit,
    IfCg,
    IfLissa,
    IfArnoldi,
    #[serde(rename = "tracincp")]
    TracInCp,
    GradDot,
    GradCos,
    RpsL2,
    Trak,
}

impl MethodName {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::IfExplicit => "if-explicit",
            MethodName::IfCg => "if-cg",
            MethodName::IfLissa => "if-lissa",
            MethodName::IfArnoldi => "if-arnoldi",
            MethodName::TracInCp => "tracincp",
            MethodName::GradDot => "grad-dot",
            MethodName::GradCos => "grad-cos",
            MethodName::RpsL2 => "rps-l2",
            MethodName::Trak => "trak",
        }
    }
}

/// One hyperparameter setting. Only the keys that apply to the method are
/// read; see [`crate::grid::default_grid`] for the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recursion_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Fixed LiSSA scale; disables automatic rescaling on divergence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
}

impl GridPoint {
    /// File-name-safe label, e.g. `regularization=1e-2_max_iter=10`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.regularization {
            parts.push(format!("regularization={v:e}"));
        }
        if let Some(v) = self.max_iter {
            parts.push(format!("max_iter={v}"));
        }
        if let Some(v) = self.recursion_depth {
            parts.push(format!("recursion_depth={v}"));
        }
        if let Some(v) = self.batch_size {
            parts.push(format!("batch_size={v}"));
        }
        if let Some(v) = self.scale {
            parts.push(format!("scale={v:e}"));
        }
        if let Some(v) = self.normalize {
            parts.push(format!("normalize={v}"));
        }
        if let Some(v) = self.projection_dim {
            parts.push(format!("projection_dim={v}"));
        }
        if let Some(v) = self.ensemble_size {
            parts.push(format!("ensemble_size={v}"));
        }
        if parts.is_empty() {
            "default".into()
        } else {
            parts.join("_")
        }
    }
}

fn default_target() -> Head {
    Head::CrossEntropy
}

fn default_distribution() -> Distribution {
    Distribution::Rademacher
}

fn default_method_regularization() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: MethodName,
    /// Replaces the method's default hyperparameter grid.
    #[serde(default)]
    pub grid: Option<Vec<GridPoint>>,
    /// Function of the test prediction being attributed.
    #[serde(default = "default_target")]
    pub target: Head,
    /// Regularization for methods whose grid does not sweep it (LiSSA, TRAK).
    #[serde(default = "default_method_regularization")]
    pub regularization: f64,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default = "default_distribution")]
    pub projection: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub mode: EnsembleMode,
    /// Ensemble sizes swept by TRAK.
    pub sizes: Vec<usize>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { mode: EnsembleMode::IndependentModels, sizes: vec![1] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    #[serde(default)]
    pub loo: bool,
    #[serde(default)]
    pub lds: Option<LdsSection>,
    #[serde(default)]
    pub noisy: Option<NoisySection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LdsSection {
    pub m: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NoisySection {
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Attribution-side model training.
    pub train: u64,
    /// Ground-truth retraining and label corruption.
    pub truth: u64,
    /// Method randomness: projections, ensemble members, stochastic solvers.
    pub method: u64,
}

/// Command-line overrides of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed_train: Option<u64>,
    pub seed_truth: Option<u64>,
    pub seed_method: Option<u64>,
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, CliError> {
        serde_json::from_slice(bytes).map_err(|e| CliError::Config(format!("config does not match the schema: {e}")))
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&bytes)?;
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(s) = o.seed_train {
            self.seeds.train = s;
        }
        if let Some(s) = o.seed_truth {
            self.seeds.truth = s;
        }
        if let Some(s) = o.seed_method {
            self.seeds.method = s;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.with_seed(0).validate()?;
        if let Source::Idx { images, labels } = &self.dataset.source {
            for p in [images, labels] {
                if !p.is_file() {
                    return Err(CliError::Config(format!("dataset file {} does not exist", p.display())));
                }
            }
        }
        if let Some(l) = &self.truth.lds {
            if l.m < 2 || !(l.alpha > 0.0 && l.alpha < 1.0) {
                return Err(CliError::Config(format!("lds needs m ≥ 2 and 0 < alpha < 1, got m={} alpha={}", l.m, l.alpha)));
            }
        }
        if let Some(n) = &self.truth.noisy {
            if !(n.fraction > 0.0 && n.fraction < 1.0) {
                return Err(CliError::Config(format!("noise fraction {} not in (0, 1)", n.fraction)));
            }
        }
        if !(self.budget_secs > 0.0) {
            return Err(CliError::Config("budget_secs must be > 0".into()));
        }
        if !(self.method.regularization >= 0.0) {
            return Err(CliError::Config("method regularization must be ≥ 0".into()));
        }
        if self.method.ensemble.sizes.is_empty() || self.method.ensemble.sizes.contains(&0) {
            return Err(CliError::Config("ensemble sizes must be non-empty and ≥ 1".into()));
        }
        if let Some(g) = &self.method.grid {
            if g.is_empty() {
                return Err(CliError::Config("an explicit grid needs at least one point".into()));
            }
        }
        Ok(())
    }

    /// Training and test sets named by the dataset section.
    pub fn load_data(&self) -> Result<(Dataset, Dataset), CliError> {
        let source = self.dataset.source.load()?;
        let train_idx = self.dataset.train.sample(source.len())?;
        let train = source.select(&train_idx);
        let test = match &self.dataset.test_source {
            Some(s) => {
                let t = s.load()?;
                t.select(&self.dataset.test.sample(t.len())?)
            }
            None => {
                let test_idx = self.dataset.test.sample(source.len())?;
                if test_idx.iter().any(|i| train_idx.binary_search(i).is_ok()) {
                    log::warn!("train and test samplers overlap");
                }
                source.select(&test_idx)
            }
        };
        if train.is_empty() || test.is_empty() {
            return Err(CliError::Config("train and test sets must be non-empty".into()));
        }
        Ok((train, test))
    }

    /// Digest of everything a ground-truth bundle of `kind` depends on.
    pub fn truth_hash(&self, kind: &str, train: &Dataset, test: &Dataset) -> String {
        let section = match kind {
            "loo" => serde_json::json!(self.truth.loo),
            "lds" => serde_json::json!(self.truth.lds),
            _ => serde_json::json!(self.truth.noisy),
        };
        digest(&serde_json::json!({
            "kind": kind,
            "model": self.model,
            "train": self.train,
            "section": section,
            "truth_seed": self.seeds.truth,
            "train_data": hex::encode(train.fingerprint()),
            "test_data": hex::encode(test.fingerprint()),
        }))
    }

    /// Digest of everything the attribution-side model depends on.
    pub fn model_hash(&self, train: &Dataset) -> String {
        digest(&serde_json::json!({
            "model": self.model,
            "train": self.train,
            "train_seed": self.seeds.train,
            "train_data": hex::encode(train.fingerprint()),
        }))
    }
}

impl RunConfig {
    /// Digest of everything an attribution sweep depends on.
    pub fn sweep_hash(&self, train: &Dataset, test: &Dataset) -> String {
        digest(&serde_json::json!({
            "model_hash": self.model_hash(train),
            "method": self.method,
            "truth_noisy": self.truth.noisy,
            "seeds": self.seeds,
            "budget_secs": self.budget_secs,
            "test_data": hex::encode(test.fingerprint()),
        }))
    }
}

pub fn digest(v: &serde_json::Value) -> String {
    format!("{:x}", Sha256::digest(serde_json::to_vec(v).expect("json")))
}

/// The published JSON schema of [`RunConfig`].
pub fn schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serialises")
}
