//! Training-data attribution at desk scale.
//!
//! The crate is organised the way an attribution study runs:
//!
//! - [`datasets`]: MNIST IDX parsing, seeded Gaussian blobs, subset samplers.
//! - [`modelzoo`]: logistic regression and a dropout MLP, SGD with momentum,
//!   checkpoint files.
//! - [`diffops`]: gradients, exact Hessian-vector products, four inverse-HVP
//!   solvers (explicit, CG, LiSSA, Arnoldi) and seeded random projection.
//! - [`attrib`]: influence functions, TracInCP, Grad-Dot, Grad-Cos, RPS-L2 and
//!   TRAK behind one [`attrib::Attributor`] interface.
//! - [`truth`]: retraining-based ground truth (leave-one-out, subset ensembles,
//!   label noise).
//! - [`metrics`]: LOO correlation, linear datamodeling score, noisy-label AUC.
//!
//! All arithmetic is `f64` and every random draw comes from a keyed,
//! counter-based stream (see [`rng`]), so results are reproducible bit for bit.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attrib;
pub mod container;
pub mod datasets;
pub mod diffops;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod modelzoo;
pub mod rng;
pub mod truth;

pub use error::{Error, Result};
