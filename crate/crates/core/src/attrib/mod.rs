//! Attributors: influence functions, TracInCP, Grad-Dot, Grad-Cos, RPS-L2 and
//! TRAK behind one interface.
//!
//! Every method follows the same lifecycle: optionally [`Attributor::cache`]
//! the training side, then [`Attributor::attribute`] a test set to get an
//! `n_train × n_test` [`ScoreMatrix`]. Positive scores mean the training point
//! supports the test prediction (lowers its loss); influence scores are
//! reported as `gᵀ(H + λI)⁻¹g` with no leading minus.

mod influence;
mod rps;
mod scores;
mod tracin;
mod trak;

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::datasets::Dataset;
use crate::diffops::TargetFunction;
use crate::error::{Error, Result};
use crate::linalg::zero_nonfinite;
use crate::modelzoo::{CheckpointSet, Head, ModelObjective, ModelSpec, ParamVector};

pub use influence::{if_attribute, influence_scores, InfluenceFunction};
pub use rps::{rps_l2_attribute, RepresenterPoints};
pub use scores::{ScoreMatrix, ScoreMetadata};
pub use tracin::{grad_cos_attribute, grad_dot_attribute, tracincp_attribute, GradCos, GradDot, TracInCp};
pub use trak::{build_ensemble, trak_attribute, EnsembleConfig, EnsembleMode, Trak, TrakMember, TrakProjection};

/// What is being attributed: a model family, its training loss, the function
/// of the test prediction to explain, and the checkpoints of one training run.
#[derive(Debug, Clone)]
pub struct AttributionTask {
    pub spec: ModelSpec,
    pub loss: Head,
    pub target: Head,
    pub checkpoints: CheckpointSet,
}

impl AttributionTask {
    /// Cross-entropy as both loss and target.
    pub fn new(spec: ModelSpec, checkpoints: CheckpointSet) -> Result<Self> {
        spec.validate()?;
        checkpoints.validate()?;
        if checkpoints.checkpoints[0].layout() != spec.layout().as_slice() {
            return Err(Error::Shape("checkpoints do not match the model spec".into()));
        }
        Ok(AttributionTask { spec, loss: Head::CrossEntropy, target: Head::CrossEntropy, checkpoints })
    }

    pub fn with_target(mut self, target: Head) -> Self {
        self.target = target;
        self
    }

    pub fn loss_fn(&self) -> ModelObjective {
        ModelObjective::new(self.spec, self.loss)
    }

    pub fn target_fn(&self) -> ModelObjective {
        ModelObjective::new(self.spec, self.target)
    }

    pub fn final_params(&self) -> &ParamVector {
        self.checkpoints.final_params()
    }
}

/// The uniform attributor lifecycle.
pub trait Attributor: Send + Sync {
    /// Method name as written to score files, e.g. `if-cg`.
    fn name(&self) -> String;

    /// Precomputes everything that depends only on `train`. Results of
    /// [`Attributor::attribute`] are identical with and without a cache.
    fn cache(&mut self, train: &Dataset) -> Result<()>;

    fn attribute(&self, train: &Dataset, test: &Dataset) -> Result<ScoreMatrix>;

    /// `attribute(train, train)` diagonal, without the full matrix where the
    /// method allows.
    fn self_influence(&self, train: &Dataset) -> Result<Vec<f64>>;

    /// Training-side per-sample gradients computed so far.
    fn train_gradient_evals(&self) -> usize;
}

/// Counts per-sample training gradients, so tests can confirm a cache is used.
#[derive(Debug, Default)]
pub(crate) struct GradCounter(AtomicUsize);

impl GradCounter {
    pub(crate) fn add(&self, n: usize) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}

/// Row-major `n × p` per-sample gradients with non-finite entries zeroed.
#[derive(Debug, Clone)]
pub(crate) struct GradMatrix {
    pub(crate) rows: usize,
    pub(crate) dim: usize,
    pub(crate) data: Vec<f64>,
    pub(crate) nonfinite: usize,
}

impl GradMatrix {
    pub(crate) fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub(crate) fn per_sample_grads<F: TargetFunction + ?Sized>(f: &F, params: &[f64], data: &Dataset) -> GradMatrix {
    let dim = params.len();
    let rows: Vec<(Vec<f64>, usize)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut g = f.sample_grad(params, data, i);
            let bad = zero_nonfinite(&mut g);
            (g, bad)
        })
        .collect();
    let mut out = GradMatrix { rows: data.len(), dim, data: Vec::with_capacity(data.len() * dim), nonfinite: 0 };
    for (g, bad) in rows {
        out.data.extend_from_slice(&g);
        out.nonfinite += bad;
    }
    if out.nonfinite > 0 {
        log::warn!("{} non-finite gradient entries replaced by zero", out.nonfinite);
    }
    out
}

/// Identifies the training set a cache was built from.
pub(crate) fn same_data(cached: &[u8; 32], data: &Dataset) -> bool {
    *cached == data.fingerprint()
}

pub(crate) fn check_data(spec: &ModelSpec, data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!("{what} set is empty")));
    }
    if data.dim() != spec.in_dim() {
        return Err(Error::Shape(format!("{what} set has {} features, model expects {}", data.dim(), spec.in_dim())));
    }
    if let Some(&y) = data.labels().iter().find(|&&y| y >= spec.n_classes()) {
        return Err(Error::Domain(format!("{what} label {y} outside [0, {})", spec.n_classes())));
    }
    Ok(())
}
