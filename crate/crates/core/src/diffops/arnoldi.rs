use nalgebra::{DMatrix, SymmetricEigen};

use super::{check_inputs, check_vec, InverseHvp, IhvpConfig, TargetFunction};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::rng::Stream;

const BREAKDOWN: f64 = 1e-12;

/// Low-rank spectral inverse from an Arnoldi (Krylov) basis of `H`:
/// `(H + λI)⁻¹ v ≈ Σ_i (λ_i + λ)⁻¹ (q_iᵀ v) q_i` over the `top_k` Ritz pairs of
/// largest magnitude, skipping modes with `λ_i + λ ≤ tol`.
#[derive(Debug, Clone)]
pub struct ArnoldiIhvp {
    dim: usize,
    /// Kept Ritz values (without λ) and vectors.
    eigenvalues: Vec<f64>,
    eigenvectors: Vec<Vec<f64>>,
    regularization: f64,
    /// Krylov dimension actually reached.
    basis_size: usize,
    breakdown: bool,
}

impl ArnoldiIhvp {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis_size(&self) -> usize {
        self.basis_size
    }

    /// True when the iteration stopped early because a new basis vector
    /// vanished (the start vector lies in an invariant subspace).
    pub fn breakdown(&self) -> bool {
        self.breakdown
    }
}

pub fn ihvp_at_x_arnoldi<F: TargetFunction + ?Sized>(
    f: &F,
    params: &[f64],
    batch: &Dataset,
    cfg: &IhvpConfig,
) -> Result<ArnoldiIhvp> {
    let mut s = Stream::new(cfg.arnoldi.seed, "arnoldi/start");
    let start: Vec<f64> = (0..params.len()).map(|_| s.normal()).collect();
    ihvp_at_x_arnoldi_from(f, params, batch, cfg, &start)
}

/// Same as [`ihvp_at_x_arnoldi`] with an explicit start vector.
pub fn ihvp_at_x_arnoldi_from<F: TargetFunction + ?Sized>(
    f: &F,
    params: &[f64],
    batch: &Dataset,
    cfg: &IhvpConfig,
    start: &[f64],
) -> Result<ArnoldiIhvp> {
    cfg.validate()?;
    check_inputs(f, params, batch)?;
    check_vec(params.len(), start)?;
    let p = params.len();
    let a = &cfg.arnoldi;
    if a.krylov_dim == 0 {
        return Err(Error::Config("krylov_dim must be ≥ 1".into()));
    }
    // A Krylov space cannot exceed the parameter count; grid settings sized
    // for larger models are clamped rather than refused.
    let m = a.krylov_dim.min(p);
    let top_k = a.top_k.min(m);
    let n0 = norm(start);
    if !(n0 > 0.0) {
        return Err(Error::Config("Arnoldi start vector must be non-zero".into()));
    }

    let mut basis: Vec<Vec<f64>> = vec![start.iter().map(|x| x / n0).collect()];
    let mut hess = DMatrix::<f64>::zeros(m + 1, m);
    let mut breakdown = false;
    for j in 0..m {
        let mut w = f.hvp_raw(params, batch, &basis[j]);
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { sample: 0, what: "Hessian-vector product in Arnoldi".into() });
        }
        let scale = norm(&w).max(1.0);
        // Gram–Schmidt, applied twice for full re-orthogonalisation.
        for _ in 0..2 {
            for (i, q) in basis.iter().enumerate() {
                let c = dot(q, &w);
                hess[(i, j)] += c;
                axpy(-c, q, &mut w);
            }
        }
        let beta = norm(&w);
        hess[(j + 1, j)] = beta;
        if j + 1 == m {
            break;
        }
        if beta < BREAKDOWN * scale {
            breakdown = true;
            break;
        }
        basis.push(w.into_iter().map(|x| x / beta).collect());
    }

    let k = basis.len();
    let t = hess.view((0, 0), (k, k)).into_owned();
    let t = (&t + t.transpose()) * 0.5;
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].abs().total_cmp(&eig.eigenvalues[x].abs()));

    let mut eigenvalues = Vec::new();
    let mut eigenvectors = Vec::new();
    for &i in order.iter().take(top_k) {
        let lam = eig.eigenvalues[i];
        if lam + cfg.regularization <= cfg.tol {
            continue;
        }
        let y = eig.eigenvectors.column(i);
        let mut u = vec![0.0; p];
        for (c, q) in y.iter().zip(&basis) {
            axpy(*c, q, &mut u);
        }
        eigenvalues.push(lam);
        eigenvectors.push(u);
    }
    Ok(ArnoldiIhvp {
        dim: p,
        eigenvalues,
        eigenvectors,
        regularization: cfg.regularization,
        basis_size: k,
        breakdown,
    })
}

impl InverseHvp for ArnoldiIhvp {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_vec(self.dim, v)?;
        let mut out = vec![0.0; self.dim];
        for (lam, q) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            axpy(dot(q, v) / (lam + self.regularization), q, &mut out);
        }
        Ok(out)
    }
}
