//! Integrative clustered regression (ICR).
//!
//! Clients fit a local model on their own data and ship four summary
//! statistics to an aggregator: the local estimate, the gradient and Hessian
//! of the local empirical loss at that estimate, and the sample count. The
//! aggregator minimizes a group-penalized, fusion-penalized quadratic
//! surrogate over a per-client coefficient matrix. The group penalty (MCP or
//! SCAD over coefficient rows) selects variables shared across clients; the
//! concave fusion penalty over all pairwise column differences drives
//! similar clients to *exactly* equal estimates, so the fitted matrix itself
//! reveals the cluster structure and the number of clusters.
//!
//! The optimizer is a proximal ADMM: the fusion penalty is majorized by a
//! weighted group norm (local linear approximation), the resulting weighted
//! fused problem is split through pairwise difference constraints, and the
//! smooth part of each ADMM block is minimized by FISTA with closed-form
//! proximal maps (group thresholding for the row penalty, ball projections
//! for the dual block). Tuning of the two penalty levels is by a modified
//! BIC over a small grid.
//!
//! The crate also contains the simulation benchmark harness (`sim`), the
//! evaluation metrics (`metrics`), and the command-line front end (`cli`).

pub mod cli;
pub mod error;
pub mod local;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod penalty;
pub mod sim;
pub mod solver;
pub mod tuning;

pub use error::{IcrError, Result};
pub use model::{
    ClusterSolution, CoefficientMatrix, DifferenceOperator, FusionState, LossKind, PenaltyFamily,
    PenaltySpec, SummaryPacket,
};
