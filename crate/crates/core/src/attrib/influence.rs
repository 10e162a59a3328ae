use rayon::prelude::*;

use super::{
    check_data, per_sample_grads, same_data, AttributionTask, Attributor, GradCounter, GradMatrix, ScoreMatrix,
    ScoreMetadata,
};
use crate::datasets::Dataset;
use crate::diffops::{
    ihvp_at_x, ihvp_at_x_arnoldi, ihvp_at_x_explicit, IhvpConfig, IhvpMethod, InverseHvp, TargetFunction,
    EXPLICIT_MAX_PARAMS,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, zero_nonfinite};

/// Influence functions `scores[j, t] = g(x_j)ᵀ (H + λI)⁻¹ g(x_t)` at the final
/// checkpoint, with `H` the Hessian of the mean training loss.
pub struct InfluenceFunction {
    task: AttributionTask,
    cfg: IhvpConfig,
    cache: Option<IfCache>,
    counter: GradCounter,
}

struct IfCache {
    fingerprint: [u8; 32],
    grads: GradMatrix,
    /// Solvers that own their precomputation (dense factor, Krylov basis).
    /// CG and LiSSA are rebound per call; binding them is cheap.
    solver: Option<Box<dyn InverseHvp>>,
}

impl InfluenceFunction {
    pub fn new(task: AttributionTask, cfg: IhvpConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.method == IhvpMethod::Explicit && task.spec.param_count() > EXPLICIT_MAX_PARAMS {
            return Err(Error::Unsupported(format!(
                "explicit influence needs the full Hessian of {} parameters (limit {EXPLICIT_MAX_PARAMS}); use cg, lissa or arnoldi",
                task.spec.param_count()
            )));
        }
        Ok(InfluenceFunction { task, cfg, cache: None, counter: GradCounter::default() })
    }

    fn owned_solver(&self, train: &Dataset) -> Result<Option<Box<dyn InverseHvp>>> {
        let loss = self.task.loss_fn();
        let params = self.task.final_params().values();
        Ok(match self.cfg.method {
            IhvpMethod::Explicit => Some(Box::new(ihvp_at_x_explicit(&loss, params, train, &self.cfg)?)),
            IhvpMethod::Arnoldi => Some(Box::new(ihvp_at_x_arnoldi(&loss, params, train, &self.cfg)?)),
            IhvpMethod::Cg | IhvpMethod::Lissa => None,
        })
    }

    fn train_grads(&self, train: &Dataset) -> GradMatrix {
        self.counter.add(train.len());
        per_sample_grads(&self.task.loss_fn(), self.task.final_params().values(), train)
    }

    /// Runs `body` with the training gradients and a bound solver, reusing the
    /// cache when it was built from `train`.
    fn with_parts<R>(&self, train: &Dataset, body: impl FnOnce(&GradMatrix, &dyn InverseHvp) -> Result<R>) -> Result<R> {
        let cached = self.cache.as_ref().filter(|c| same_data(&c.fingerprint, train));
        let fresh_grads;
        let grads = match cached {
            Some(c) => &c.grads,
            None => {
                fresh_grads = self.train_grads(train);
                &fresh_grads
            }
        };
        if let Some(solver) = cached.and_then(|c| c.solver.as_deref()) {
            return body(grads, solver);
        }
        let loss = self.task.loss_fn();
        let solver = ihvp_at_x(&loss, self.task.final_params().values(), train, &self.cfg)?;
        body(grads, solver.as_ref())
    }

    fn metadata(&self, nonfinite: usize) -> ScoreMetadata {
        let mut meta = ScoreMetadata { method: self.name(), nonfinite_count: nonfinite, ..Default::default() };
        let h = &mut meta.hyperparams;
        h.insert("regularization".into(), self.cfg.regularization.into());
        match self.cfg.method {
            IhvpMethod::Explicit => {}
            IhvpMethod::Cg => {
                h.insert("max_iter".into(), self.cfg.max_iter.into());
                h.insert("tol".into(), self.cfg.tol.into());
            }
            IhvpMethod::Lissa => {
                h.insert("recursion_depth".into(), self.cfg.lissa.recursion_depth.into());
                h.insert("batch_size".into(), self.cfg.lissa.batch_size.into());
                h.insert("scale".into(), self.cfg.lissa.scale.into());
                meta.seeds.push(self.cfg.lissa.seed);
            }
            IhvpMethod::Arnoldi => {
                h.insert("krylov_dim".into(), self.cfg.arnoldi.krylov_dim.into());
                h.insert("top_k".into(), self.cfg.arnoldi.top_k.into());
                meta.seeds.push(self.cfg.arnoldi.seed);
            }
        }
        meta.seeds.push(self.task.checkpoints.seed);
        meta
    }
}

impl Attributor for InfluenceFunction {
    fn name(&self) -> String {
        let m = match self.cfg.method {
            IhvpMethod::Explicit => "explicit",
            IhvpMethod::Cg => "cg",
            IhvpMethod::Lissa => "lissa",
            IhvpMethod::Arnoldi => "arnoldi",
        };
        format!("if-{m}")
    }

    fn cache(&mut self, train: &Dataset) -> Result<()> {
        check_data(&self.task.spec, train, "training")?;
        let grads = self.train_grads(train);
        let solver = self.owned_solver(train)?;
        self.cache = Some(IfCache { fingerprint: train.fingerprint(), grads, solver });
        Ok(())
    }

    fn attribute(&self, train: &Dataset, test: &Dataset) -> Result<ScoreMatrix> {
        check_data(&self.task.spec, train, "training")?;
        check_data(&self.task.spec, test, "test")?;
        let target = self.task.target_fn();
        let params = self.task.final_params().values();
        let test_grads = per_sample_grads(&target, params, test);
        self.with_parts(train, |grads, solver| {
            let columns = influence_columns(grads, &test_grads, solver)?;
            ScoreMatrix::from_columns(train.len(), columns, self.metadata(grads.nonfinite + test_grads.nonfinite))
        })
    }

    fn self_influence(&self, train: &Dataset) -> Result<Vec<f64>> {
        check_data(&self.task.spec, train, "training")?;
        let params = self.task.final_params().values();
        let target_grads = per_sample_grads(&self.task.target_fn(), params, train);
        self.with_parts(train, |grads, solver| {
            (0..train.len())
                .into_par_iter()
                .map(|j| {
                    let mut u = solver.apply(target_grads.row(j))?;
                    zero_nonfinite(&mut u);
                    let s = dot(grads.row(j), &u);
                    Ok(if s.is_finite() { s } else { 0.0 })
                })
                .collect()
        })
    }

    fn train_gradient_evals(&self) -> usize {
        self.counter.get()
    }
}

pub fn if_attribute(task: &AttributionTask, cfg: &IhvpConfig, train: &Dataset, test: &Dataset) -> Result<ScoreMatrix> {
    InfluenceFunction::new(task.clone(), cfg.clone())?.attribute(train, test)
}

fn influence_columns(grads: &GradMatrix, test_grads: &GradMatrix, solver: &dyn InverseHvp) -> Result<Vec<Vec<f64>>> {
    (0..test_grads.rows)
        .into_par_iter()
        .map(|t| {
            let mut u = solver.apply(test_grads.row(t))?;
            zero_nonfinite(&mut u);
            Ok((0..grads.rows).map(|j| dot(grads.row(j), &u)).collect())
        })
        .collect()
}

/// Influence scores for arbitrary objectives: `scores[j][t] = ∇loss_jᵀ (H + λI)⁻¹ ∇target_t`,
/// `H` the Hessian of the mean of `loss` over `train`.
pub fn influence_scores<L, T>(
    loss: &L,
    target: &T,
    params: &[f64],
    cfg: &IhvpConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<Vec<f64>>>
where
    L: TargetFunction + ?Sized,
    T: TargetFunction + ?Sized,
{
    let grads = per_sample_grads(loss, params, train);
    let test_grads = per_sample_grads(target, params, test);
    let solver = ihvp_at_x(loss, params, train, cfg)?;
    let columns = influence_columns(&grads, &test_grads, solver.as_ref())?;
    Ok((0..train.len()).map(|j| columns.iter().map(|c| c[j]).collect()).collect())
}
