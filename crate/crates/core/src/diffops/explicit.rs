use nalgebra::{DMatrix, DVector};

use super::{check_inputs, check_vec, InverseHvp, IhvpConfig, TargetFunction};
use crate::datasets::Dataset;
use crate::error::{Error, Result};

/// Largest parameter count for which the Hessian is materialised.
pub const EXPLICIT_MAX_PARAMS: usize = 20_000;

enum Factor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// Dense `(H + λI)` built column by column from exact HVPs and factorised once
/// (Cholesky, or LU when the matrix is not positive definite).
pub struct ExplicitIhvp {
    dim: usize,
    factor: Factor,
}

pub fn ihvp_at_x_explicit<F: TargetFunction + ?Sized>(
    f: &F,
    params: &[f64],
    batch: &Dataset,
    cfg: &IhvpConfig,
) -> Result<ExplicitIhvp> {
    cfg.validate()?;
    check_inputs(f, params, batch)?;
    let p = params.len();
    if p > EXPLICIT_MAX_PARAMS {
        return Err(Error::Unsupported(format!(
            "explicit inverse Hessian refuses {p} parameters (limit {EXPLICIT_MAX_PARAMS}); use cg, lissa or arnoldi"
        )));
    }
    let mut h = DMatrix::<f64>::zeros(p, p);
    let mut e = vec![0.0; p];
    for j in 0..p {
        e[j] = 1.0;
        let col = f.hvp_raw(params, batch, &e);
        e[j] = 0.0;
        if col.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { sample: 0, what: format!("Hessian column {j}") });
        }
        h.column_mut(j).copy_from_slice(&col);
    }
    let mut a = (&h + h.transpose()) * 0.5;
    for i in 0..p {
        a[(i, i)] += cfg.regularization;
    }
    let factor = match a.clone().cholesky() {
        Some(c) => Factor::Cholesky(c),
        None => {
            let lu = a.lu();
            let diag: Vec<f64> = (0..p).map(|i| lu.u()[(i, i)].abs()).collect();
            let max = diag.iter().cloned().fold(0.0, f64::max);
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(min > 1e-12 * max) {
                return Err(Error::Singular(format!(
                    "H + {}I is singular to working precision; increase the regularization",
                    cfg.regularization
                )));
            }
            Factor::Lu(lu)
        }
    };
    Ok(ExplicitIhvp { dim: p, factor })
}

impl InverseHvp for ExplicitIhvp {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_vec(self.dim, v)?;
        let b = DVector::from_column_slice(v);
        let u = match &self.factor {
            Factor::Cholesky(c) => c.solve(&b),
            Factor::Lu(lu) => lu
                .solve(&b)
                .ok_or_else(|| Error::Singular("LU solve failed; increase the regularization".into()))?,
        };
        Ok(u.as_slice().to_vec())
    }
}
