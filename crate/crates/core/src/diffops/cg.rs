use super::{check_inputs, check_vec, InverseHvp, IhvpConfig, TargetFunction};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};

/// Conjugate gradients on `(H + λI) u = v` with the HVP as the matvec.
pub struct CgIhvp<'f, F: TargetFunction + ?Sized> {
    f: &'f F,
    params: Vec<f64>,
    batch: Dataset,
    regularization: f64,
    max_iter: usize,
    tol: f64,
}

pub fn ihvp_at_x_cg<'f, F: TargetFunction + ?Sized>(
    f: &'f F,
    params: &[f64],
    batch: &Dataset,
    cfg: &IhvpConfig,
) -> Result<CgIhvp<'f, F>> {
    cfg.validate()?;
    check_inputs(f, params, batch)?;
    Ok(CgIhvp {
        f,
        params: params.to_vec(),
        batch: batch.clone(),
        regularization: cfg.regularization,
        max_iter: cfg.max_iter,
        tol: cfg.tol,
    })
}

impl<F: TargetFunction + ?Sized> CgIhvp<'_, F> {
    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.f.hvp_raw(&self.params, &self.batch, x);
        axpy(self.regularization, x, &mut y);
        y
    }
}

impl<F: TargetFunction + ?Sized> InverseHvp for CgIhvp<'_, F> {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_vec(self.dim(), v)?;
        let mut x = vec![0.0; v.len()];
        let mut r = v.to_vec();
        let mut p = r.clone();
        let mut rs = dot(&r, &r);
        let target = self.tol * rs.sqrt();
        for _ in 0..self.max_iter {
            if rs.sqrt() <= target || rs == 0.0 {
                break;
            }
            let ap = self.matvec(&p);
            let pap = dot(&p, &ap);
            if !pap.is_finite() {
                return Err(Error::Divergence("conjugate gradients produced a NaN curvature".into()));
            }
            if pap <= 0.0 {
                log::warn!("CG met non-positive curvature {pap:e}; stopping early (H + λI not positive definite)");
                break;
            }
            let alpha = rs / pap;
            axpy(alpha, &p, &mut x);
            axpy(-alpha, &ap, &mut r);
            let rs_new = dot(&r, &r);
            if !rs_new.is_finite() {
                return Err(Error::Divergence("conjugate gradients residual is NaN".into()));
            }
            let beta = rs_new / rs;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + beta * *pi;
            }
            rs = rs_new;
        }
        Ok(x)
    }
}
