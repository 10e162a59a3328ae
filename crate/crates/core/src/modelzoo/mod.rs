//! Small differentiable models: multinomial logistic regression (no bias) and
//! a three-layer ReLU MLP with biases and optional dropout after the first two
//! layers. Parameters live in a flat [`ParamVector`] with a named layout.

mod checkpoint;
mod dropout;
pub mod net;
mod objective;
pub mod scalar;
mod train;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::rng::Stream;

pub use checkpoint::{arch_tag, checkpoint_bytes, load_checkpoint, save_checkpoint, Checkpoint};
pub use dropout::{activate_dropout, DropoutMasks, DropoutModel};
pub use net::Head;
pub use objective::ModelObjective;
pub use train::{train, CheckpointSet, TrainConfig};

use net::{forward_sample, head_and_dlogits, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    LogReg {
        in_dim: usize,
        n_classes: usize,
    },
    Mlp {
        in_dim: usize,
        h1: usize,
        h2: usize,
        n_classes: usize,
        #[serde(default)]
        dropout_rate: f64,
    },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let (d, _, _, c) = self.dims();
        if d == 0 || c < 2 {
            return Err(Error::Config(format!("{self:?}: need in_dim ≥ 1 and n_classes ≥ 2")));
        }
        if let ModelSpec::Mlp { h1, h2, dropout_rate, .. } = *self {
            if h1 == 0 || h2 == 0 {
                return Err(Error::Config("hidden layers must be non-empty".into()));
            }
            if !(0.0..1.0).contains(&dropout_rate) {
                return Err(Error::Config(format!("dropout_rate {dropout_rate} not in [0, 1)")));
            }
        }
        Ok(())
    }

    /// `(in_dim, h1, h2, n_classes)`; hidden sizes are 0 for logistic regression.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        match *self {
            ModelSpec::LogReg { in_dim, n_classes } => (in_dim, 0, 0, n_classes),
            ModelSpec::Mlp { in_dim, h1, h2, n_classes, .. } => (in_dim, h1, h2, n_classes),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.dims().0
    }

    pub fn n_classes(&self) -> usize {
        self.dims().3
    }

    pub fn dropout_rate(&self) -> f64 {
        match *self {
            ModelSpec::LogReg { .. } => 0.0,
            ModelSpec::Mlp { dropout_rate, .. } => dropout_rate,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map_or(0, |s| s.offset + s.numel())
    }

    /// Segments in declaration order; weights are `[out, in]` row-major.
    pub fn layout(&self) -> Vec<Segment> {
        let shapes: Vec<(&str, Vec<usize>)> = match *self {
            ModelSpec::LogReg { in_dim, n_classes } => vec![("linear.weight", vec![n_classes, in_dim])],
            ModelSpec::Mlp { in_dim, h1, h2, n_classes, .. } => vec![
                ("fc1.weight", vec![h1, in_dim]),
                ("fc1.bias", vec![h1]),
                ("fc2.weight", vec![h2, h1]),
                ("fc2.bias", vec![h2]),
                ("fc3.weight", vec![n_classes, h2]),
                ("fc3.bias", vec![n_classes]),
            ],
        };
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape)| {
                let seg = Segment { name: name.to_owned(), shape, offset };
                offset += seg.numel();
                seg
            })
            .collect()
    }

    /// Index ranges of the last linear layer: weight, then bias (MLP only).
    pub fn last_layer(&self) -> (std::ops::Range<usize>, Option<std::ops::Range<usize>>) {
        let layout = self.layout();
        match self {
            ModelSpec::LogReg { .. } => (layout[0].range(), None),
            ModelSpec::Mlp { .. } => (layout[4].range(), Some(layout[5].range())),
        }
    }

    /// Seeded initial parameters: zeros for logistic regression, fan-in
    /// Kaiming-uniform weights `U(±√(6/fan_in))` and zero biases for the MLP.
    pub fn init(&self, seed: u64) -> ParamVector {
        let layout = self.layout();
        let mut values = vec![0.0; self.param_count()];
        if let ModelSpec::Mlp { .. } = self {
            let mut s = Stream::new(seed, "init");
            for seg in layout.iter().filter(|s| s.shape.len() == 2) {
                let bound = (6.0 / seg.shape[1] as f64).sqrt();
                for v in &mut values[seg.range()] {
                    *v = s.uniform_in(-bound, bound);
                }
            }
        }
        ParamVector { values, layout }
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector { values: vec![0.0; self.param_count()], layout: self.layout() }
    }

    pub(crate) fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout != self.layout() {
            return Err(Error::Shape(format!(
                "parameter layout ({} values) does not match {self:?} ({} values)",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_batch(&self, batch: &Dataset) -> Result<()> {
        if batch.dim() != self.in_dim() {
            return Err(Error::Shape(format!(
                "batch has {} features, model expects {}",
                batch.dim(),
                self.in_dim()
            )));
        }
        if let Some(&y) = batch.labels().iter().find(|&&y| y >= self.n_classes()) {
            return Err(Error::Domain(format!("label {y} outside [0, {})", self.n_classes())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Flattened model parameters with a named-segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let mut expected = 0;
        for seg in &layout {
            if seg.offset != expected {
                return Err(Error::Shape(format!(
                    "segment {} starts at {} but previous segment ends at {expected}",
                    seg.name, seg.offset
                )));
            }
            expected += seg.numel();
        }
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "layout covers {expected} values but {} supplied",
                values.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    /// Same layout as `self`, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values, self.layout.clone())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.iter().find(|s| s.name == name).map(|s| &self.values[s.range()])
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Row-major `n × n_classes` logits for a row-major `n × in_dim` input.
pub fn forward(spec: &ModelSpec, params: &ParamVector, inputs: &[f64], in_dim: usize) -> Result<Vec<f64>> {
    forward_with_masks(spec, params, inputs, in_dim, None)
}

pub(crate) fn forward_with_masks(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &[f64],
    in_dim: usize,
    masks: Option<net::MaskRef<'_>>,
) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    if in_dim != spec.in_dim() || !inputs.len().is_multiple_of(in_dim.max(1)) {
        return Err(Error::Shape(format!(
            "input of width {in_dim} ({} values) for model with in_dim {}",
            inputs.len(),
            spec.in_dim()
        )));
    }
    let mut ws = Workspace::<f64>::new(spec);
    let mut out = Vec::with_capacity(inputs.len() / in_dim * spec.n_classes());
    for x in inputs.chunks_exact(in_dim) {
        forward_sample(spec, params.values(), x, masks, &mut ws);
        out.extend_from_slice(&ws.z);
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &Dataset) -> Result<f64> {
    let v = sample_outputs(spec, params, batch, Head::CrossEntropy)?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

/// Per-sample `head` values (no dropout).
pub fn sample_outputs(spec: &ModelSpec, params: &ParamVector, batch: &Dataset, head: Head) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let mut ws = Workspace::<f64>::new(spec);
    Ok((0..batch.len())
        .map(|i| {
            forward_sample(spec, params.values(), batch.row(i), None, &mut ws);
            head_and_dlogits(head, batch.label(i), &mut ws)
        })
        .collect())
}

/// Softmax probability of each sample's own label.
pub fn correct_class_probs(spec: &ModelSpec, params: &ParamVector, batch: &Dataset) -> Result<Vec<f64>> {
    Ok(sample_outputs(spec, params, batch, Head::CrossEntropy)?
        .into_iter()
        .map(|ce| (-ce).exp())
        .collect())
}

pub fn accuracy(spec: &ModelSpec, params: &ParamVector, batch: &Dataset) -> Result<f64> {
    spec.check_batch(batch)?;
    let logits = forward(spec, params, batch.features(), batch.dim())?;
    let c = spec.n_classes();
    let hits = logits
        .chunks_exact(c)
        .zip(batch.labels())
        .filter(|(z, &y)| {
            let best = z
                .iter()
                .enumerate()
                .fold(0, |b, (k, v)| if *v > z[b] { k } else { b });
            best == y
        })
        .count();
    Ok(hits as f64 / batch.len().max(1) as f64)
}

/// Penultimate features `h(x)` per sample (input features for logistic
/// regression, second hidden activations for the MLP), row-major.
pub fn penultimate_features(spec: &ModelSpec, params: &ParamVector, batch: &Dataset) -> Result<Vec<Vec<f64>>> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let mut ws = Workspace::<f64>::new(spec);
    Ok((0..batch.len())
        .map(|i| {
            forward_sample(spec, params.values(), batch.row(i), None, &mut ws);
            ws.penultimate(spec).to_vec()
        })
        .collect())
}
