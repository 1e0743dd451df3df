//! Learning sparse transport costs from an observed transport plan.
//!
//! Given an observed plan `π̂` and dissimilarity matrices `d¹..dᴷ`, the crate
//! estimates a sparse `β` such that the entropic optimal transport plan for the
//! cost `Σ_k β_k dᵏ` reproduces `π̂`, by minimizing an L1-penalized dual loss.
//!
//! Modules:
//! * [`ot`]: data model, loss, gradients and Sinkhorn updates.
//! * [`preprocess`]: basis centering and construction, input checks.
//! * [`solvers`]: SISTA plus ISTA and coordinate-descent baselines.
//! * [`bench`]: synthetic instances and solver races.
//! * [`inference`]: penalty search and bootstrap standard errors.
//! * [`io`]: text formats and problem bundles.

pub mod bench;
pub mod error;
pub mod inference;
pub mod io;
pub mod numeric;
pub mod ot;
pub mod preprocess;
pub mod solvers;

pub use error::{Error, Result};
pub use ot::{
    CostParams, DissimilarityBasis, ObservedPlan, Potentials, Problem, SupportMode,
};
pub use solvers::{InitialPoint, Solution, SolverConfig};
