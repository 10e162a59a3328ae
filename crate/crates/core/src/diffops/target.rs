use nalgebra::DMatrix;

use crate::datasets::Dataset;

/// A scalar function of parameters and a batch, twice differentiable almost
/// everywhere. Values and gradients are means over the batch.
///
/// The `_raw` methods may return non-finite numbers; the checked entry points
/// are [`super::grad`] and [`super::hvp`].
pub trait TargetFunction: Send + Sync {
    fn n_params(&self) -> usize;

    fn description(&self) -> String;

    /// One value per row of `batch`.
    fn sample_values(&self, params: &[f64], batch: &Dataset) -> Vec<f64>;

    fn value(&self, params: &[f64], batch: &Dataset) -> f64 {
        let v = self.sample_values(params, batch);
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    fn grad_raw(&self, params: &[f64], batch: &Dataset) -> Vec<f64>;

    /// Gradient of row `i` alone.
    fn sample_grad(&self, params: &[f64], batch: &Dataset, i: usize) -> Vec<f64> {
        self.grad_raw(params, &batch.select(&[i]))
    }

    fn hvp_raw(&self, params: &[f64], batch: &Dataset, v: &[f64]) -> Vec<f64>;
}

/// `f(θ) = ½ θᵀ A θ` for a fixed symmetric `A`, independent of the batch.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    a: DMatrix<f64>,
}

impl QuadraticForm {
    /// Uses `(A + Aᵀ)/2`.
    pub fn new(a: DMatrix<f64>) -> Self {
        assert!(a.is_square(), "quadratic form needs a square matrix");
        let sym = (&a + a.transpose()) * 0.5;
        QuadraticForm { a: sym }
    }

    /// `½ c ‖θ‖²`, Hessian `cI`.
    pub fn scaled_identity(n: usize, c: f64) -> Self {
        QuadraticForm { a: DMatrix::identity(n, n) * c }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        QuadraticForm { a: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)) }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVector::from_column_slice(x);
        (&self.a * x).as_slice().to_vec()
    }
}

impl TargetFunction for QuadraticForm {
    fn n_params(&self) -> usize {
        self.a.nrows()
    }

    fn description(&self) -> String {
        format!("quadratic form of dimension {}", self.a.nrows())
    }

    fn sample_values(&self, params: &[f64], batch: &Dataset) -> Vec<f64> {
        let v = 0.5 * crate::linalg::dot(params, &self.apply(params));
        vec![v; batch.len()]
    }

    fn grad_raw(&self, params: &[f64], _batch: &Dataset) -> Vec<f64> {
        self.apply(params)
    }

    fn hvp_raw(&self, _params: &[f64], _batch: &Dataset, v: &[f64]) -> Vec<f64> {
        self.apply(v)
    }
}
