//! Consensus gradient flows of agents constrained to an implicit hypersurface
//! `{c = 0}`, with second-order certificates for the equilibria they reach.
//!
//! - [`manifold`]: surfaces, Gauss map, nearest-point retraction, sampling.
//! - [`graph`]: weighted interaction graphs.
//! - [`flow`]: disagreement, projected fields, RK4 integration.
//! - [`analysis`]: multipliers, projected Hessian, stability classification,
//!   geometric condition checks.
//! - [`experiment`]: seeded Monte-Carlo basins and the ellipsoid/sphere
//!   equivalence test.

// Negated comparisons are used on purpose so that NaN fails tolerance checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod graph;
pub mod manifold;

pub use analysis::{
    check_assumption1, check_convexity, classify_equilibrium, strong_convexity_alpha, AlphaReport,
    AssumptionReport, Classification, StabilityReport,
};
pub use error::{Error, Result};
pub use flow::{integrate, Configuration, FieldKind, FlowParams, StopReason, Trajectory};
pub use graph::Graph;
pub use manifold::{BuiltinSurface, ImplicitSurface, SurfaceKind, SurfacePoint};
