use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::rng::Stream;

use super::net::{Head, MaskRef};
use super::objective::ModelObjective;
use super::{forward_with_masks, ModelSpec, ParamVector};
use crate::diffops::TargetFunction;

/// One fixed pair of scaled Bernoulli masks, shared by every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub hidden1: Vec<f64>,
    pub hidden2: Vec<f64>,
}

impl DropoutMasks {
    /// Keeps each unit with probability `1 − rate`; kept units are scaled by
    /// `1/(1 − rate)`.
    pub fn sample(h1: usize, h2: usize, rate: f64, mask_seed: u64) -> Self {
        let mut s = Stream::new(mask_seed, "dropout/mask");
        let keep = 1.0 / (1.0 - rate);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| if s.bernoulli(1.0 - rate) { keep } else { 0.0 }).collect()
        };
        let hidden1 = draw(h1);
        let hidden2 = draw(h2);
        DropoutMasks { hidden1, hidden2 }
    }

    pub fn as_ref(&self) -> MaskRef<'_> {
        MaskRef { hidden1: &self.hidden1, hidden2: &self.hidden2 }
    }
}

/// A trained MLP evaluated under one fixed dropout mask.
#[derive(Debug, Clone)]
pub struct DropoutModel {
    spec: ModelSpec,
    params: ParamVector,
    masks: DropoutMasks,
}

pub fn activate_dropout(spec: &ModelSpec, params: &ParamVector, rate: f64, mask_seed: u64) -> Result<DropoutModel> {
    let ModelSpec::Mlp { h1, h2, .. } = *spec else {
        return Err(Error::Unsupported("dropout masks need an MLP; logistic regression has no hidden layer".into()));
    };
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("dropout rate {rate} not in (0, 1)")));
    }
    spec.check_params(params)?;
    Ok(DropoutModel {
        spec: *spec,
        params: params.clone(),
        masks: DropoutMasks::sample(h1, h2, rate, mask_seed),
    })
}

impl DropoutModel {
    pub fn masks(&self) -> &DropoutMasks {
        &self.masks
    }

    pub fn forward(&self, inputs: &[f64], in_dim: usize) -> Result<Vec<f64>> {
        forward_with_masks(&self.spec, &self.params, inputs, in_dim, Some(self.masks.as_ref()))
    }

    pub fn loss(&self, batch: &Dataset) -> Result<f64> {
        self.spec.check_batch(batch)?;
        Ok(self.objective(Head::CrossEntropy).value(self.params.values(), batch))
    }

    /// The masked model as a differentiable objective.
    pub fn objective(&self, head: Head) -> ModelObjective {
        ModelObjective::new(self.spec, head).with_masks(self.masks.clone())
    }
}
