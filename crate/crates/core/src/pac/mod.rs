//! PAC-bounded optimisation of a Gaussian surrogate over policy parameters.

pub mod bound;
pub mod optimize;
pub mod surrogate;

use thiserror::Error;

pub use bound::{optimal_alpha, pac_constraint_bound, pac_cost_bound, ArchiveIteration, BoundValue, SampleArchive};
pub use optimize::{optimize_policy, monte_carlo, IterationLog, PacConfig, PacOutcome, PacBoundReport, SampleEvaluator};
pub use surrogate::{renyi2_diag_gauss, renyi2_with_grad, Renyi2, Surrogate, SurrogateSummary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PacError {
    #[error("Rényi divergence undefined in dim {dim}: var_new {var_new} >= 2 * var_old {var_old}")]
    InfeasibleDivergence { dim: usize, var_new: f64, var_old: f64 },
    #[error("sample archive is empty")]
    EmptyArchive,
    #[error("normalisation constant must be positive and finite, got {0}")]
    BadNormaliser(f64),
    #[error("archive contains negative shifted costs")]
    NegativeCost,
    #[error("non-finite value: {0}")]
    NonFinite(String),
}
