use crate::datasets::Dataset;
use crate::diffops::TargetFunction;

use super::dropout::DropoutMasks;
use super::net::{backward_sample, forward_sample, head_and_dlogits, Head, Workspace};
use super::scalar::{Dual, Scalar};
use super::ModelSpec;

/// A per-sample head (cross-entropy or margin) of a zoo model, averaged over
/// the batch. Optionally evaluated under fixed dropout masks.
#[derive(Debug, Clone)]
pub struct ModelObjective {
    spec: ModelSpec,
    head: Head,
    masks: Option<DropoutMasks>,
}

impl ModelObjective {
    pub fn new(spec: ModelSpec, head: Head) -> Self {
        ModelObjective { spec, head, masks: None }
    }

    /// Mean cross-entropy, the training loss.
    pub fn cross_entropy(spec: ModelSpec) -> Self {
        Self::new(spec, Head::CrossEntropy)
    }

    pub fn margin(spec: ModelSpec) -> Self {
        Self::new(spec, Head::Margin)
    }

    pub fn with_masks(mut self, masks: DropoutMasks) -> Self {
        self.masks = Some(masks);
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn head(&self) -> Head {
        self.head
    }

    /// Adds `weight · ∇(head)` for every listed sample into `grad`; returns the
    /// weighted sum of head values.
    fn accumulate<T: Scalar>(&self, params: &[T], batch: &Dataset, rows: &[usize], weight: f64, grad: &mut [T]) -> T {
        let mut ws = Workspace::<T>::new(&self.spec);
        let masks = self.masks.as_ref().map(DropoutMasks::as_ref);
        let mut total = T::zero();
        for &i in rows {
            forward_sample(&self.spec, params, batch.row(i), masks, &mut ws);
            let v = head_and_dlogits(self.head, batch.label(i), &mut ws);
            total += v.scale(weight);
            backward_sample(&self.spec, params, masks, &mut ws, weight, grad);
        }
        total
    }
}

impl TargetFunction for ModelObjective {
    fn n_params(&self) -> usize {
        self.spec.param_count()
    }

    fn description(&self) -> String {
        let head = match self.head {
            Head::CrossEntropy => "cross-entropy",
            Head::Margin => "margin",
        };
        let masks = if self.masks.is_some() { " (dropout masks)" } else { "" };
        format!("{head} of {:?}{masks}", self.spec)
    }

    fn sample_values(&self, params: &[f64], batch: &Dataset) -> Vec<f64> {
        let mut ws = Workspace::<f64>::new(&self.spec);
        let masks = self.masks.as_ref().map(DropoutMasks::as_ref);
        (0..batch.len())
            .map(|i| {
                forward_sample(&self.spec, params, batch.row(i), masks, &mut ws);
                head_and_dlogits(self.head, batch.label(i), &mut ws)
            })
            .collect()
    }

    fn grad_raw(&self, params: &[f64], batch: &Dataset) -> Vec<f64> {
        let mut g = vec![0.0; params.len()];
        let rows: Vec<usize> = (0..batch.len()).collect();
        self.accumulate(params, batch, &rows, 1.0 / batch.len().max(1) as f64, &mut g);
        g
    }

    fn sample_grad(&self, params: &[f64], batch: &Dataset, i: usize) -> Vec<f64> {
        let mut g = vec![0.0; params.len()];
        self.accumulate(params, batch, &[i], 1.0, &mut g);
        g
    }

    fn hvp_raw(&self, params: &[f64], batch: &Dataset, v: &[f64]) -> Vec<f64> {
        let p: Vec<Dual> = params.iter().zip(v).map(|(&a, &b)| Dual::new(a, b)).collect();
        let mut g = vec![Dual::default(); params.len()];
        let rows: Vec<usize> = (0..batch.len()).collect();
        self.accumulate(&p, batch, &rows, 1.0 / batch.len().max(1) as f64, &mut g);
        g.into_iter().map(|d| d.du).collect()
    }
}
