//! Automatic doubly robust random forests.
//!
//! Estimates conditional moment functionals `θ₀(x) = E[m(Z; g₀(x, W)) | X = x]`
//! with high-dimensional nuisances: a nuisance forest and per-point forest
//! lassos give debiased moments `ψᵢ` for one half of the data, and an honest
//! target forest grown on that half averages them.

pub mod cli;
pub mod datasets;
pub mod error;
pub mod estimator;
pub mod forest;
pub mod moments;
pub mod quadlasso;
pub mod scalar;
pub mod simharness;

pub use datasets::{load_csv, save_csv, split_halves, Dataset, HalfSplit};
pub use error::{DrrfError, Result};
pub use forest::{ForestKernel, ForestParams};
pub use scalar::Scalar;

/// Quadratic-plus-penalty problem in double precision.
pub type QuadLassoProblem = quadlasso::QuadLassoProblem<f64>;
/// Quadratic-plus-penalty problem in single precision.
pub type QuadLassoProblemF32 = quadlasso::QuadLassoProblem<f32>;
pub type SolverSettings = quadlasso::SolverSettings<f64>;
pub type MomentSpec = moments::MomentSpec<f64>;
pub type NuisancePair = moments::NuisancePair<f64>;
