use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{check_data, per_sample_grads, same_data, Attributor, GradCounter, ScoreMatrix, ScoreMetadata};
use crate::datasets::Dataset;
use crate::diffops::{random_project, Distribution, IdentityProjection, ProjectionSpec, Projector, TargetFunction};
use crate::error::{Error, Result};
use crate::modelzoo::{train, DropoutMasks, Head, ModelObjective, ModelSpec, ParamVector, TrainConfig};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// One independently trained model per seed.
    IndependentModels,
    /// One trained model evaluated under a fixed dropout mask per seed.
    DropoutMasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub mode: EnsembleMode,
    pub count: usize,
    pub seeds: Vec<u64>,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.count != self.seeds.len() {
            return Err(Error::Config(format!(
                "ensemble count {} must be ≥ 1 and equal the number of seeds ({})",
                self.count,
                self.seeds.len()
            )));
        }
        Ok(())
    }
}

/// One ensemble member: trained parameters, optionally under dropout masks.
/// The seed names the member and keys its projection.
#[derive(Debug, Clone, PartialEq)]
pub struct TrakMember {
    pub seed: u64,
    pub params: ParamVector,
    pub masks: Option<DropoutMasks>,
}

/// Trains (or masks) the ensemble described by `ensemble`. Independent
/// members are trained with `cfg.seed` replaced by each member seed; dropout
/// members share one model trained with `cfg.seed`.
pub fn build_ensemble(
    spec: &ModelSpec,
    ensemble: &EnsembleConfig,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<TrakMember>> {
    ensemble.validate()?;
    match ensemble.mode {
        EnsembleMode::IndependentModels => ensemble
            .seeds
            .iter()
            .map(|&seed| {
                let ck = train(spec, data, &TrainConfig { seed, checkpoint_epochs: vec![], ..cfg.clone() })?;
                Ok(TrakMember { seed, params: ck.final_params().clone(), masks: None })
            })
            .collect(),
        EnsembleMode::DropoutMasks => {
            let ModelSpec::Mlp { h1, h2, dropout_rate, .. } = *spec else {
                return Err(Error::Unsupported("dropout ensembles need an MLP".into()));
            };
            if dropout_rate <= 0.0 {
                return Err(Error::Config("dropout ensembles need dropout_rate > 0".into()));
            }
            let params = train(spec, data, &TrainConfig { checkpoint_epochs: vec![], ..cfg.clone() })?
                .final_params()
                .clone();
            Ok(ensemble
                .seeds
                .iter()
                .map(|&seed| TrakMember {
                    seed,
                    params: params.clone(),
                    masks: Some(DropoutMasks::sample(h1, h2, dropout_rate, seed)),
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrakProjection {
    /// Seeded JL sketch to `dim` coordinates (at most the parameter count).
    Random { dim: usize, seed: u64, distribution: Distribution },
    /// No projection.
    Identity,
}

/// TRAK: `scores[j, t] = Q̄_jj · (1/I) Σ_i [φ_i (Φ_iᵀΦ_i + λI)⁻¹ Φ_iᵀ]_{t j}`, with
/// `Φ_i`/`φ_i` the projected train/test target gradients of member `i` and
/// `Q̄_jj` the member average of `1 − p_correct(x_j)`.
pub struct Trak {
    spec: ModelSpec,
    target: Head,
    /// Sorted by seed, so member order never affects rounding.
    members: Vec<TrakMember>,
    projection: TrakProjection,
    lambda: f64,
    cache: Option<TrakCache>,
    counter: GradCounter,
}

struct TrakCache {
    fingerprint: [u8; 32],
    side: TrainSide,
}

struct TrainSide {
    /// Per member: `(Φᵀ Φ + λI)⁻¹ Φᵀ` (k × n) and `Φ` (n × k).
    solved: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    q: Vec<f64>,
    nonfinite: usize,
}

impl Trak {
    pub fn new(
        spec: ModelSpec,
        target: Head,
        mut members: Vec<TrakMember>,
        projection: TrakProjection,
        lambda: f64,
    ) -> Result<Self> {
        spec.validate()?;
        if members.is_empty() {
            return Err(Error::Config("TRAK needs at least one ensemble member".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!("TRAK regularization must be ≥ 0, got {lambda}")));
        }
        if let TrakProjection::Random { dim: 0, .. } = projection {
            return Err(Error::Config("projection dimension must be ≥ 1".into()));
        }
        for m in &members {
            if m.params.layout() != spec.layout().as_slice() {
                return Err(Error::Shape(format!("member {} does not match the model spec", m.seed)));
            }
        }
        members.sort_by_key(|m| m.seed);
        Ok(Trak { spec, target, members, projection, lambda, cache: None, counter: GradCounter::default() })
    }

    /// Sketch size actually used: the requested dimension capped at the
    /// parameter count.
    pub fn effective_dim(&self) -> usize {
        let p = self.spec.param_count();
        match self.projection {
            TrakProjection::Random { dim, .. } => dim.min(p),
            TrakProjection::Identity => p,
        }
    }

    fn projector(&self, member: &TrakMember) -> Result<Box<dyn Projector>> {
        let p = self.spec.param_count();
        Ok(match self.projection {
            TrakProjection::Identity => Box::new(IdentityProjection { dim: p }),
            TrakProjection::Random { seed, distribution, .. } => Box::new(random_project(ProjectionSpec {
                in_dim: p,
                out_dim: self.effective_dim(),
                seed: derive_seed(seed, "member", member.seed),
                distribution,
            })?),
        })
    }

    fn objective(&self, member: &TrakMember, head: Head) -> ModelObjective {
        let f = ModelObjective::new(self.spec, head);
        match &member.masks {
            Some(m) => f.with_masks(m.clone()),
            None => f,
        }
    }

    /// Projected target gradients, `n × k`.
    fn features(&self, member: &TrakMember, proj: &dyn Projector, data: &Dataset) -> Result<(DMatrix<f64>, usize)> {
        let g = per_sample_grads(&self.objective(member, self.target), member.params.values(), data);
        let rows = proj.project_rows(&g.data)?;
        Ok((DMatrix::from_row_slice(data.len(), proj.out_dim(), &rows), g.nonfinite))
    }

    fn train_side(&self, train: &Dataset) -> Result<TrainSide> {
        let n = train.len();
        let k = self.effective_dim();
        if k >= n && self.lambda == 0.0 {
            return Err(Error::Config(format!(
                "projected Gram matrix is rank-deficient (k = {k} ≥ n = {n}); set a TRAK regularization > 0"
            )));
        }
        let mut side = TrainSide { solved: Vec::new(), q: vec![0.0; n], nonfinite: 0 };
        for member in &self.members {
            self.counter.add(n);
            let proj = self.projector(member)?;
            let (phi, bad) = self.features(member, proj.as_ref(), train)?;
            side.nonfinite += bad;
            side.solved.push((self.solve(&phi)?, phi));
            let ce = self.objective(member, Head::CrossEntropy).sample_values(member.params.values(), train);
            for (q, l) in side.q.iter_mut().zip(ce) {
                *q += 1.0 - (-l).exp();
            }
        }
        let count = self.members.len() as f64;
        side.q.iter_mut().for_each(|q| *q /= count);
        Ok(side)
    }

    /// `(ΦᵀΦ + λI)⁻¹ Φᵀ`, via the `n × n` system `Φᵀ (ΦΦᵀ + λI)⁻¹` when `k > n`.
    fn solve(&self, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, k) = phi.shape();
        let singular = || Error::Singular("TRAK Gram matrix is singular; increase the TRAK regularization".into());
        if k > n {
            let gram = phi * phi.transpose() + DMatrix::identity(n, n) * self.lambda;
            let chol = gram.cholesky().ok_or_else(singular)?;
            Ok(phi.transpose() * chol.inverse())
        } else {
            let gram = phi.transpose() * phi + DMatrix::identity(k, k) * self.lambda;
            let chol = gram.cholesky().ok_or_else(singular)?;
            Ok(chol.solve(&phi.transpose()))
        }
    }

    fn with_train<R>(&self, train: &Dataset, body: impl FnOnce(&TrainSide) -> Result<R>) -> Result<R> {
        match self.cache.as_ref().filter(|c| same_data(&c.fingerprint, train)) {
            Some(c) => body(&c.side),
            None => body(&self.train_side(train)?),
        }
    }

    fn metadata(&self, nonfinite: usize) -> ScoreMetadata {
        let mut meta = ScoreMetadata {
            method: format!("trak-{}", self.members.len()),
            seeds: self.members.iter().map(|m| m.seed).collect(),
            nonfinite_count: nonfinite,
            ..Default::default()
        };
        let h = &mut meta.hyperparams;
        h.insert("regularization".into(), self.lambda.into());
        h.insert("ensemble".into(), self.members.len().into());
        h.insert("dropout_masks".into(), self.members.iter().any(|m| m.masks.is_some()).into());
        match self.projection {
            TrakProjection::Identity => {
                h.insert("projection".into(), "identity".into());
            }
            TrakProjection::Random { dim, seed, distribution } => {
                h.insert("proj_dim".into(), dim.into());
                h.insert("effective_proj_dim".into(), self.effective_dim().into());
                h.insert("proj_seed".into(), seed.into());
                h.insert("distribution".into(), serde_json::to_value(distribution).unwrap_or_default());
            }
        }
        meta
    }
}

impl Attributor for Trak {
    fn name(&self) -> String {
        format!("trak-{}", self.members.len())
    }

    fn cache(&mut self, train: &Dataset) -> Result<()> {
        check_data(&self.spec, train, "training")?;
        let side = self.train_side(train)?;
        self.cache = Some(TrakCache { fingerprint: train.fingerprint(), side });
        Ok(())
    }

    fn attribute(&self, train: &Dataset, test: &Dataset) -> Result<ScoreMatrix> {
        check_data(&self.spec, train, "training")?;
        check_data(&self.spec, test, "test")?;
        let (n, m) = (train.len(), test.len());
        self.with_train(train, |side| {
            let mut kernel = DMatrix::<f64>::zeros(m, n);
            let mut nonfinite = side.nonfinite;
            for (member, (solved, _)) in self.members.iter().zip(&side.solved) {
                let proj = self.projector(member)?;
                let (phi_test, bad) = self.features(member, proj.as_ref(), test)?;
                nonfinite += bad;
                kernel += phi_test * solved;
            }
            let count = self.members.len() as f64;
            let mut scores = vec![0.0; n * m];
            for j in 0..n {
                for t in 0..m {
                    scores[j * m + t] = kernel[(t, j)] / count * side.q[j];
                }
            }
            ScoreMatrix::new(n, m, scores, self.metadata(nonfinite))
        })
    }

    fn self_influence(&self, train: &Dataset) -> Result<Vec<f64>> {
        check_data(&self.spec, train, "training")?;
        self.with_train(train, |side| {
            let count = self.members.len() as f64;
            Ok((0..train.len())
                .map(|j| {
                    let k: f64 = side.solved.iter().map(|(solved, phi)| phi.row(j).dot(&solved.column(j).transpose())).sum();
                    k / count * side.q[j]
                })
                .collect())
        })
    }

    fn train_gradient_evals(&self) -> usize {
        self.counter.get()
    }
}

pub fn trak_attribute(
    spec: &ModelSpec,
    target: Head,
    members: Vec<TrakMember>,
    projection: TrakProjection,
    lambda: f64,
    train: &Dataset,
    test: &Dataset,
) -> Result<ScoreMatrix> {
    Trak::new(*spec, target, members, projection, lambda)?.attribute(train, test)
}
