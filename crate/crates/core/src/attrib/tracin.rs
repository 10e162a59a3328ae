use super::{
    check_data, per_sample_grads, same_data, AttributionTask, Attributor, GradCounter, GradMatrix, ScoreMatrix,
    ScoreMetadata,
};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// `scores[j, t] = Σ_i η_i g_i(x_t)ᵀ g_i(x_j)` over the task's checkpoints.
pub struct TracInCp {
    task: AttributionTask,
    cache: Option<TracCache>,
    counter: GradCounter,
}

struct TracCache {
    fingerprint: [u8; 32],
    per_checkpoint: Vec<GradMatrix>,
}

impl TracInCp {
    pub fn new(task: AttributionTask) -> Result<Self> {
        task.checkpoints.validate()?;
        Ok(TracInCp { task, cache: None, counter: GradCounter::default() })
    }

    fn train_grads(&self, train: &Dataset) -> Vec<GradMatrix> {
        let loss = self.task.loss_fn();
        self.task
            .checkpoints
            .checkpoints
            .iter()
            .map(|c| {
                self.counter.add(train.len());
                per_sample_grads(&loss, c.values(), train)
            })
            .collect()
    }

    fn with_grads<R>(&self, train: &Dataset, body: impl FnOnce(&[GradMatrix]) -> R) -> R {
        match self.cache.as_ref().filter(|c| same_data(&c.fingerprint, train)) {
            Some(c) => body(&c.per_checkpoint),
            None => body(&self.train_grads(train)),
        }
    }

    fn check(&self, train: &Dataset) -> Result<()> {
        let ck = &self.task.checkpoints;
        if ck.step_sizes.len() != ck.checkpoints.len() {
            return Err(Error::Config(format!(
                "{} checkpoints but {} step sizes",
                ck.checkpoints.len(),
                ck.step_sizes.len()
            )));
        }
        ck.validate()?;
        check_data(&self.task.spec, train, "training")
    }
}

impl Attributor for TracInCp {
    fn name(&self) -> String {
        "tracincp".into()
    }

    fn cache(&mut self, train: &Dataset) -> Result<()> {
        self.check(train)?;
        let per_checkpoint = self.train_grads(train);
        self.cache = Some(TracCache { fingerprint: train.fingerprint(), per_checkpoint });
        Ok(())
    }

    fn attribute(&self, train: &Dataset, test: &Dataset) -> Result<ScoreMatrix> {
        self.check(train)?;
        check_data(&self.task.spec, test, "test")?;
        let target = self.task.target_fn();
        let ck = &self.task.checkpoints;
        let (n, m) = (train.len(), test.len());
        self.with_grads(train, |train_grads| {
            let mut scores = vec![0.0; n * m];
            let mut nonfinite = 0;
            for ((params, eta), g_train) in ck.checkpoints.iter().zip(&ck.step_sizes).zip(train_grads) {
                let g_test = per_sample_grads(&target, params.values(), test);
                nonfinite += g_train.nonfinite + g_test.nonfinite;
                for j in 0..n {
                    for t in 0..m {
                        scores[j * m + t] += eta * dot(g_test.row(t), g_train.row(j));
                    }
                }
            }
            let mut meta = ScoreMetadata { method: self.name(), nonfinite_count: nonfinite, ..Default::default() };
            meta.hyperparams.insert("checkpoints".into(), ck.len().into());
            meta.hyperparams.insert("step_sizes".into(), ck.step_sizes.clone().into());
            meta.hyperparams.insert("epochs".into(), ck.epochs.clone().into());
            meta.seeds.push(ck.seed);
            ScoreMatrix::new(n, m, scores, meta)
        })
    }

    fn self_influence(&self, train: &Dataset) -> Result<Vec<f64>> {
        self.check(train)?;
        let target = self.task.target_fn();
        let ck = &self.task.checkpoints;
        self.with_grads(train, |train_grads| {
            let mut out = vec![0.0; train.len()];
            for ((params, eta), g_train) in ck.checkpoints.iter().zip(&ck.step_sizes).zip(train_grads) {
                let g_target = per_sample_grads(&target, params.values(), train);
                for (j, o) in out.iter_mut().enumerate() {
                    *o += eta * dot(g_target.row(j), g_train.row(j));
                }
            }
            Ok(out)
        })
    }

    fn train_gradient_evals(&self) -> usize {
        self.counter.get()
    }
}

/// Gradient similarity at the final checkpoint, optionally cosine-normalised.
struct FinalGradients {
    task: AttributionTask,
    cosine: bool,
    cache: Option<(/* fingerprint */ [u8; 32], GradMatrix)>,
    counter: GradCounter,
}

impl FinalGradients {
    fn train_grads(&self, train: &Dataset) -> GradMatrix {
        self.counter.add(train.len());
        per_sample_grads(&self.task.loss_fn(), self.task.final_params().values(), train)
    }

    fn with_grads<R>(&self, train: &Dataset, body: impl FnOnce(&GradMatrix) -> R) -> R {
        match self.cache.as_ref().filter(|c| same_data(&c.0, train)) {
            Some((_, g)) => body(g),
            None => body(&self.train_grads(train)),
        }
    }

    fn pair(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = dot(a, b);
        if !self.cosine {
            return d;
        }
        let denom = norm(a) * norm(b);
        if denom > 0.0 && a == b {
            1.0
        } else if denom > 0.0 {
            (d / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    }

    fn name(&self) -> String {
        if self.cosine { "grad-cos" } else { "grad-dot" }.into()
    }

    fn cache(&mut self, train: &Dataset) -> Result<()> {
        check_data(&self.task.spec, train, "training")?;
        self.cache = Some((train.fingerprint(), self.train_grads(train)));
        Ok(())
    }

    fn attribute(&self, train: &Dataset, test: &Dataset) -> Result<ScoreMatrix> {
        check_data(&self.task.spec, train, "training")?;
        check_data(&self.task.spec, test, "test")?;
        let g_test = per_sample_grads(&self.task.target_fn(), self.task.final_params().values(), test);
        let (n, m) = (train.len(), test.len());
        self.with_grads(train, |g_train| {
            let mut scores = vec![0.0; n * m];
            for j in 0..n {
                for t in 0..m {
                    scores[j * m + t] = self.pair(g_test.row(t), g_train.row(j));
                }
            }
            let meta = ScoreMetadata {
                method: self.name(),
                nonfinite_count: g_train.nonfinite + g_test.nonfinite,
                seeds: vec![self.task.checkpoints.seed],
                ..Default::default()
            };
            ScoreMatrix::new(n, m, scores, meta)
        })
    }

    fn self_influence(&self, train: &Dataset) -> Result<Vec<f64>> {
        check_data(&self.task.spec, train, "training")?;
        let same_head = self.task.loss == self.task.target;
        self.with_grads(train, |g_train| {
            if same_head && self.cosine {
                // cos(g, g) is exactly 1 for any non-zero gradient
                return Ok((0..train.len()).map(|j| if norm(g_train.row(j)) > 0.0 { 1.0 } else { 0.0 }).collect());
            }
            let g_target = if same_head {
                None
            } else {
                Some(per_sample_grads(&self.task.target_fn(), self.task.final_params().values(), train))
            };
            Ok((0..train.len())
                .map(|j| {
                    let t = g_target.as_ref().map_or(g_train.row(j), |g| g.row(j));
                    self.pair(t, g_train.row(j))
                })
                .collect())
        })
    }
}

/// `scores[j, t] = g(x_t)ᵀ g(x_j)` at the final checkpoint.
pub struct GradDot(FinalGradients);

/// Grad-Dot divided by `‖g(x_t)‖ ‖g(x_j)‖`; zero gradients score 0.
pub struct GradCos(FinalGradients);

impl GradDot {
    pub fn new(task: AttributionTask) -> Self {
        GradDot(FinalGradients { task, cosine: false, cache: None, counter: GradCounter::default() })
    }
}

impl GradCos {
    pub fn new(task: AttributionTask) -> Self {
        GradCos(FinalGradients { task, cosine: true, cache: None, counter: GradCounter::default() })
    }
}

macro_rules! delegate_attributor {
    ($t:ty) => {
        impl Attributor for $t {
            fn name(&self) -> String {
                self.0.name()
            }
            fn cache(&mut self, train: &Dataset) -> Result<()> {
                self.0.cache(train)
            }
            fn attribute(&self, train: &Dataset, test: &Dataset) -> Result<ScoreMatrix> {
                self.0.attribute(train, test)
            }
            fn self_influence(&self, train: &Dataset) -> Result<Vec<f64>> {
                self.0.self_influence(train)
            }
            fn train_gradient_evals(&self) -> usize {
                self.0.counter.get()
            }
        }
    };
}

delegate_attributor!(GradDot);
delegate_attributor!(GradCos);

pub fn tracincp_attribute(task: &AttributionTask, train: &Dataset, test: &Dataset) -> Result<ScoreMatrix> {
    TracInCp::new(task.clone())?.attribute(train, test)
}

pub fn grad_dot_attribute(task: &AttributionTask, train: &Dataset, test: &Dataset) -> Result<ScoreMatrix> {
    GradDot::new(task.clone()).attribute(train, test)
}

pub fn grad_cos_attribute(task: &AttributionTask, train: &Dataset, test: &Dataset) -> Result<ScoreMatrix> {
    GradCos::new(task.clone()).attribute(train, test)
}
