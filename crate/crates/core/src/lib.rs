//! Joint user association and multi-cell resource allocation over ON/OFF
//! activity patterns in heterogeneous cellular networks.
//!
//! The crate builds random network drops ([`scenario`]), enumerates
//! candidate activity patterns ([`patterns`]), tabulates per-pattern link
//! rates ([`rates`]) and maximizes the sum of log user rates with
//! Frank-Wolfe type solvers ([`fw`], [`corrective`]). [`association`]
//! turns relaxed solutions into single-cell associations and [`harness`]
//! compares pattern strategies over many drops.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod corrective;
pub mod error;
pub mod fw;
pub mod harness;
pub mod patterns;
pub mod rates;
pub mod scenario;

pub use error::{Error, Result};
pub use association::{solve_single_bs, Association, JointResult, RelaxedAlg};
pub use corrective::solve_relaxed_fc;
pub use fw::{solve_relaxed_fw, Allocation, SolverOptions, SolverResult};
pub use patterns::{PatternSet, Strategy, Topology};
pub use rates::{compute_rate_matrix, FadingOptions, RateMatrix};
pub use scenario::{generate_scenario, Scenario, ScenarioConfig};
