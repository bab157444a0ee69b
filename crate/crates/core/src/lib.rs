//! Fractional white-noise calculus for `1/2 < H < 1`.
//!
//! * [`frackernel`]: the operator M, its constants and the H-inner product.
//! * [`fbmgen`]: coupled Brownian / fractional Brownian driver paths.
//! * [`wiscalc`]: Wick–Itô–Skorohod integrals and second-moment formulas.
//! * [`sdesolve`]: Picard and Euler solvers for the hybrid SDE.
//! * [`mcharness`]: named verification experiments with pass/fail reports.

pub mod error;
pub mod fbmgen;
pub mod frackernel;
pub mod mcharness;
pub mod quad;
pub mod rng;
pub mod sdesolve;
pub mod stats;
pub mod wiscalc;

pub use error::{FwnError, Result};
pub use frackernel::HurstModel;
