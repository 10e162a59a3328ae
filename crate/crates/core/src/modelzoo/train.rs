use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::rng::Stream;

use super::net::{backward_sample, forward_sample, head_and_dlogits, Head, MaskRef, Workspace};
use super::{ModelSpec, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    /// L2 penalty coefficient added to the gradient as `weight_decay · θ`.
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        if let Some(&e) = self.checkpoint_epochs.iter().find(|&&e| e == 0 || e > self.epochs) {
            return Err(Error::Config(format!("checkpoint epoch {e} outside [1, {}]", self.epochs)));
        }
        Ok(())
    }

    /// `count` checkpoint epochs spread evenly over training, ending at the
    /// last epoch.
    pub fn evenly_spaced_checkpoints(epochs: usize, count: usize) -> Vec<usize> {
        let count = count.min(epochs);
        let mut v: Vec<usize> = (1..=count).map(|i| (i * epochs).div_ceil(count)).collect();
        v.dedup();
        v
    }
}

/// Parameters saved during one training run with the step size in force at
/// each checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSet {
    pub checkpoints: Vec<ParamVector>,
    pub step_sizes: Vec<f64>,
    /// Epoch at which each checkpoint was taken (0 = initialisation).
    pub epochs: Vec<usize>,
    pub seed: u64,
}

impl CheckpointSet {
    pub fn single(params: ParamVector, step_size: f64, seed: u64) -> Self {
        CheckpointSet { checkpoints: vec![params], step_sizes: vec![step_size], epochs: vec![0], seed }
    }

    pub fn final_params(&self) -> &ParamVector {
        self.checkpoints.last().expect("checkpoint set is never empty")
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(Error::Config("checkpoint set is empty".into()));
        }
        if self.step_sizes.len() != self.checkpoints.len() {
            return Err(Error::Config(format!(
                "{} checkpoints but {} step sizes",
                self.checkpoints.len(),
                self.step_sizes.len()
            )));
        }
        if self.step_sizes.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        let layout = self.checkpoints[0].layout();
        if self.checkpoints.iter().any(|c| c.layout() != layout) {
            return Err(Error::Config("checkpoints do not share one layout".into()));
        }
        Ok(())
    }
}

/// Minibatch SGD with momentum on mean cross-entropy.
///
/// Initialisation, per-epoch shuffling and per-sample training dropout masks
/// are all drawn from streams keyed by `cfg.seed`. When `batch_size ≥ n` the
/// run is full-batch and rows are visited in dataset order.
///
/// Emits a checkpoint at each entry of `cfg.checkpoint_epochs` and at the
/// final epoch (or only the initialisation when `epochs == 0`); every
/// checkpoint records `η = cfg.lr`.
pub fn train(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<CheckpointSet> {
    spec.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    spec.check_batch(data)?;

    let init = spec.init(cfg.seed);
    let layout = init.layout().to_vec();
    let mut theta = init.into_values();
    let mut velocity = vec![0.0; theta.len()];
    let mut grad = vec![0.0; theta.len()];

    let n = data.len();
    let full_batch = cfg.batch_size >= n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = Stream::new(cfg.seed, "train/shuffle");
    let mut dropout = Stream::new(cfg.seed, "train/dropout");
    let rate = spec.dropout_rate();
    let (_, h1, h2, _) = spec.dims();
    let keep_scale = 1.0 / (1.0 - rate);
    let mut m1 = vec![1.0; h1];
    let mut m2 = vec![1.0; h2];
    let mut ws = Workspace::<f64>::new(spec);

    let mut out = CheckpointSet { checkpoints: Vec::new(), step_sizes: Vec::new(), epochs: Vec::new(), seed: cfg.seed };
    let push = |theta: &[f64], epoch: usize, out: &mut CheckpointSet| {
        out.checkpoints.push(ParamVector { values: theta.to_vec(), layout: layout.clone() });
        out.step_sizes.push(cfg.lr);
        out.epochs.push(epoch);
    };
    if cfg.epochs == 0 {
        push(&theta, 0, &mut out);
        return Ok(out);
    }

    for epoch in 1..=cfg.epochs {
        if !full_batch {
            shuffle.shuffle(&mut order);
        }
        for rows in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let w = 1.0 / rows.len() as f64;
            let mut batch_loss = 0.0;
            for &i in rows {
                let masks = if rate > 0.0 {
                    for m in m1.iter_mut().chain(m2.iter_mut()) {
                        *m = if dropout.bernoulli(1.0 - rate) { keep_scale } else { 0.0 };
                    }
                    Some(MaskRef { hidden1: &m1, hidden2: &m2 })
                } else {
                    None
                };
                forward_sample(spec, &theta, data.row(i), masks, &mut ws);
                batch_loss += w * head_and_dlogits(Head::CrossEntropy, data.label(i), &mut ws);
                backward_sample(spec, &theta, masks, &mut ws, w, &mut grad);
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!("training produced a non-finite loss in epoch {epoch}")));
            }
            for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                let g = g + cfg.weight_decay * *t;
                *v = cfg.momentum * *v + g;
                *t -= cfg.lr * *v;
            }
        }
        if cfg.checkpoint_epochs.contains(&epoch) || epoch == cfg.epochs {
            push(&theta, epoch, &mut out);
        }
    }
    Ok(out)
}
