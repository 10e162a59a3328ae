use super::{check_data, same_data, AttributionTask, Attributor, GradCounter, ScoreMatrix, ScoreMetadata};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::modelzoo::{forward, penultimate_features, ModelSpec};

/// Representer points with an L2-regularised last layer:
/// `scores[j, t] = −1/(2λn) · α_j[c_t] · h_jᵀ h_t`, where `α_j = softmax(z_j) − e_{y_j}`
/// is the cross-entropy derivative w.r.t. the logits of training point `j`,
/// `c_t` the test label and `h` the input of the last linear layer (with a
/// constant 1 appended when that layer has a bias).
pub struct RepresenterPoints {
    task: AttributionTask,
    lambda: f64,
    normalize: bool,
    cache: Option<RpsCache>,
    counter: GradCounter,
}

struct RpsCache {
    fingerprint: [u8; 32],
    train: TrainSide,
}

struct TrainSide {
    features: Vec<Vec<f64>>,
    /// Row-major `n × n_classes` logit derivatives.
    alpha: Vec<f64>,
}

impl RepresenterPoints {
    pub fn new(task: AttributionTask, lambda: f64, normalize: bool) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("RPS regularization must be > 0, got {lambda}")));
        }
        Ok(RepresenterPoints { task, lambda, normalize, cache: None, counter: GradCounter::default() })
    }

    fn features(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        let spec = &self.task.spec;
        let mut h = penultimate_features(spec, self.task.final_params(), data)?;
        for row in &mut h {
            if self.normalize {
                let n = norm(row);
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
            if matches!(spec, ModelSpec::Mlp { .. }) {
                row.push(1.0);
            }
        }
        Ok(h)
    }

    fn train_side(&self, train: &Dataset) -> Result<TrainSide> {
        self.counter.add(train.len());
        let spec = &self.task.spec;
        let c = spec.n_classes();
        let mut alpha = forward(spec, self.task.final_params(), train.features(), train.dim())?;
        for (z, &y) in alpha.chunks_mut(c).zip(train.labels()) {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for (k, v) in z.iter_mut().enumerate() {
                *v = (*v - m).exp() / s - if k == y { 1.0 } else { 0.0 };
            }
        }
        Ok(TrainSide { features: self.features(train)?, alpha })
    }

    fn with_train<R>(&self, train: &Dataset, body: impl FnOnce(&TrainSide) -> Result<R>) -> Result<R> {
        match self.cache.as_ref().filter(|c| same_data(&c.fingerprint, train)) {
            Some(c) => body(&c.train),
            None => body(&self.train_side(train)?),
        }
    }

    fn factor(&self, n: usize) -> f64 {
        -1.0 / (2.0 * self.lambda * n as f64)
    }
}

impl Attributor for RepresenterPoints {
    fn name(&self) -> String {
        "rps-l2".into()
    }

    fn cache(&mut self, train: &Dataset) -> Result<()> {
        check_data(&self.task.spec, train, "training")?;
        let side = self.train_side(train)?;
        self.cache = Some(RpsCache { fingerprint: train.fingerprint(), train: side });
        Ok(())
    }

    fn attribute(&self, train: &Dataset, test: &Dataset) -> Result<ScoreMatrix> {
        check_data(&self.task.spec, train, "training")?;
        check_data(&self.task.spec, test, "test")?;
        let h_test = self.features(test)?;
        let c = self.task.spec.n_classes();
        let (n, m) = (train.len(), test.len());
        let k = self.factor(n);
        self.with_train(train, |side| {
            let mut scores = vec![0.0; n * m];
            for j in 0..n {
                for t in 0..m {
                    let a = side.alpha[j * c + test.label(t)];
                    scores[j * m + t] = k * a * dot(&side.features[j], &h_test[t]);
                }
            }
            let mut meta = ScoreMetadata { method: self.name(), seeds: vec![self.task.checkpoints.seed], ..Default::default() };
            meta.hyperparams.insert("regularization".into(), self.lambda.into());
            meta.hyperparams.insert("normalize".into(), self.normalize.into());
            ScoreMatrix::new(n, m, scores, meta)
        })
    }

    fn self_influence(&self, train: &Dataset) -> Result<Vec<f64>> {
        check_data(&self.task.spec, train, "training")?;
        let c = self.task.spec.n_classes();
        let k = self.factor(train.len());
        self.with_train(train, |side| {
            Ok((0..train.len())
                .map(|j| {
                    let h = &side.features[j];
                    k * side.alpha[j * c + train.label(j)] * dot(h, h)
                })
                .collect())
        })
    }

    fn train_gradient_evals(&self) -> usize {
        self.counter.get()
    }
}

pub fn rps_l2_attribute(
    task: &AttributionTask,
    lambda: f64,
    normalize: bool,
    train: &Dataset,
    test: &Dataset,
) -> Result<ScoreMatrix> {
    RepresenterPoints::new(task.clone(), lambda, normalize)?.attribute(train, test)
}
