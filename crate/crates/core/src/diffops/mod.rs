//! Function-level numerics shared by the attributors.
//!
//! - [`grad`] and [`hvp`]: gradients and exact Hessian-vector products of any
//!   [`TargetFunction`].
//! - Inverse-HVP solvers, each in two forms. `ihvp_<alg>(f, cfg)` returns an
//!   [`Ihvp`] that takes `(params, batch, v)` on every call; `ihvp_at_x_<alg>`
//!   binds `(params, batch)` once, does whatever precomputation the algorithm
//!   allows (a dense factorisation, a Krylov eigenbasis, sampled minibatches)
//!   and then serves any number of `v`.
//! - [`random_project`]: seeded Johnson–Lindenstrauss sketches.
//!
//! Regularisation always means solving `(H + λI) u = v`.

mod arnoldi;
mod cg;
mod explicit;
mod lissa;
mod projection;
mod target;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};

pub use arnoldi::{ihvp_at_x_arnoldi, ihvp_at_x_arnoldi_from, ArnoldiIhvp};
pub use cg::{ihvp_at_x_cg, CgIhvp};
pub use explicit::{ihvp_at_x_explicit, ExplicitIhvp, EXPLICIT_MAX_PARAMS};
pub use lissa::{ihvp_at_x_lissa, LissaIhvp};
pub use projection::{random_project, Distribution, IdentityProjection, ProjectionSpec, Projector, RandomProjection};
pub use target::{QuadraticForm, TargetFunction};

fn check_inputs<F: TargetFunction + ?Sized>(f: &F, params: &[f64], batch: &Dataset) -> Result<()> {
    if params.len() != f.n_params() {
        return Err(Error::Shape(format!("{} parameters for a function of {}", params.len(), f.n_params())));
    }
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    Ok(())
}

/// Finds the first sample whose value or gradient is not finite.
fn locate_nonfinite<F: TargetFunction + ?Sized>(f: &F, params: &[f64], batch: &Dataset, what: &str) -> Error {
    let values = f.sample_values(params, batch);
    let sample = values
        .iter()
        .position(|v| !v.is_finite())
        .or_else(|| (0..batch.len()).find(|&i| f.sample_grad(params, batch, i).iter().any(|g| !g.is_finite())))
        .unwrap_or(0);
    Error::NonFinite { sample, what: format!("{what} of {}", f.description()) }
}

/// `∇θ f(params; batch)`.
pub fn grad<F: TargetFunction + ?Sized>(f: &F, params: &[f64], batch: &Dataset) -> Result<Vec<f64>> {
    check_inputs(f, params, batch)?;
    let g = f.grad_raw(params, batch);
    if g.iter().any(|x| !x.is_finite()) {
        return Err(locate_nonfinite(f, params, batch, "gradient"));
    }
    Ok(g)
}

/// `H(params; batch) v`, exact (forward-over-reverse for zoo models).
pub fn hvp<F: TargetFunction + ?Sized>(f: &F, params: &[f64], batch: &Dataset, v: &[f64]) -> Result<Vec<f64>> {
    check_inputs(f, params, batch)?;
    if v.len() != params.len() {
        return Err(Error::Shape(format!("vector of length {} for {} parameters", v.len(), params.len())));
    }
    let hv = f.hvp_raw(params, batch, v);
    if hv.iter().any(|x| !x.is_finite()) {
        return Err(locate_nonfinite(f, params, batch, "Hessian-vector product"));
    }
    Ok(hv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IhvpMethod {
    Explicit,
    Cg,
    Lissa,
    Arnoldi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LissaConfig {
    pub recursion_depth: usize,
    pub batch_size: usize,
    /// Divisor keeping `I − (H + λI)/scale` a contraction.
    pub scale: f64,
    /// Double `scale` and restart when the recursion blows up.
    pub auto_scale: bool,
    pub seed: u64,
}

impl Default for LissaConfig {
    fn default() -> Self {
        LissaConfig { recursion_depth: 500, batch_size: 10, scale: 10.0, auto_scale: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArnoldiConfig {
    pub krylov_dim: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for ArnoldiConfig {
    fn default() -> Self {
        ArnoldiConfig { krylov_dim: 50, top_k: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IhvpConfig {
    pub method: IhvpMethod,
    pub regularization: f64,
    /// CG iteration cap.
    pub max_iter: usize,
    /// CG relative residual target; Arnoldi drops modes with `λ_i + λ ≤ tol`.
    pub tol: f64,
    pub lissa: LissaConfig,
    pub arnoldi: ArnoldiConfig,
}

impl Default for IhvpConfig {
    fn default() -> Self {
        IhvpConfig {
            method: IhvpMethod::Cg,
            regularization: 0.0,
            max_iter: 10,
            tol: 1e-6,
            lissa: LissaConfig::default(),
            arnoldi: ArnoldiConfig::default(),
        }
    }
}

impl IhvpConfig {
    pub fn new(method: IhvpMethod, regularization: f64) -> Self {
        IhvpConfig { method, regularization, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.regularization >= 0.0) {
            return Err(Error::Config(format!("regularization {} must be ≥ 0", self.regularization)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be ≥ 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tol must be ≥ 0".into()));
        }
        if self.method == IhvpMethod::Lissa && (!(self.lissa.scale > 0.0) || self.lissa.batch_size == 0) {
            return Err(Error::Config("LiSSA needs scale > 0 and batch_size ≥ 1".into()));
        }
        Ok(())
    }
}

/// An inverse-HVP bound to fixed `(params, batch)`: `v ↦ (H + λI)⁻¹ v`.
pub trait InverseHvp: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

fn check_vec(dim: usize, v: &[f64]) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Shape(format!("vector of length {} for operator of dimension {dim}", v.len())));
    }
    Ok(())
}

/// Binds `(params, batch)` with the solver named in `cfg.method`.
pub fn ihvp_at_x<'f, F: TargetFunction + ?Sized>(
    f: &'f F,
    params: &[f64],
    batch: &Dataset,
    cfg: &IhvpConfig,
) -> Result<Box<dyn InverseHvp + 'f>> {
    Ok(match cfg.method {
        IhvpMethod::Explicit => Box::new(ihvp_at_x_explicit(f, params, batch, cfg)?),
        IhvpMethod::Cg => Box::new(ihvp_at_x_cg(f, params, batch, cfg)?),
        IhvpMethod::Lissa => Box::new(ihvp_at_x_lissa(f, params, batch, cfg)?),
        IhvpMethod::Arnoldi => Box::new(ihvp_at_x_arnoldi(f, params, batch, cfg)?),
    })
}

/// Unbound inverse-HVP operator: `(params, batch, v) ↦ (H + λI)⁻¹ v`.
pub struct Ihvp<'f, F: TargetFunction + ?Sized> {
    f: &'f F,
    cfg: IhvpConfig,
}

impl<'f, F: TargetFunction + ?Sized> Ihvp<'f, F> {
    pub fn new(f: &'f F, cfg: IhvpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Ihvp { f, cfg })
    }

    pub fn config(&self) -> &IhvpConfig {
        &self.cfg
    }

    pub fn apply(&self, params: &[f64], batch: &Dataset, v: &[f64]) -> Result<Vec<f64>> {
        ihvp_at_x(self.f, params, batch, &self.cfg)?.apply(v)
    }
}

fn with_method(cfg: &IhvpConfig, method: IhvpMethod) -> IhvpConfig {
    IhvpConfig { method, ..cfg.clone() }
}

pub fn ihvp_explicit<'f, F: TargetFunction + ?Sized>(f: &'f F, cfg: &IhvpConfig) -> Result<Ihvp<'f, F>> {
    Ihvp::new(f, with_method(cfg, IhvpMethod::Explicit))
}

pub fn ihvp_cg<'f, F: TargetFunction + ?Sized>(f: &'f F, cfg: &IhvpConfig) -> Result<Ihvp<'f, F>> {
    Ihvp::new(f, with_method(cfg, IhvpMethod::Cg))
}

pub fn ihvp_lissa<'f, F: TargetFunction + ?Sized>(f: &'f F, cfg: &IhvpConfig) -> Result<Ihvp<'f, F>> {
    Ihvp::new(f, with_method(cfg, IhvpMethod::Lissa))
}

pub fn ihvp_arnoldi<'f, F: TargetFunction + ?Sized>(f: &'f F, cfg: &IhvpConfig) -> Result<Ihvp<'f, F>> {
    Ihvp::new(f, with_method(cfg, IhvpMethod::Arnoldi))
}
