//! Locally conservative transport solvers on cell-graph meshes.
//!
//! The crate pairs a classical finite-volume solver for convection–diffusion
//! problems ([`fvm`]) with a flux-form graph-network surrogate ([`model`])
//! whose learned face fluxes keep the solver's discrete conservation property:
//! every face flux is computed once and scattered with opposite signs to the
//! two adjacent cells, so the volume-weighted total of the transported
//! quantity is invariant under time stepping regardless of parameter values.
//!
//! Supporting modules:
//!
//! * [`mesh`] — cell-centered interval meshes and their face-adjacency graphs.
//! * [`autodiff`] — a small reverse-mode tape over dense `f64` matrices, with
//!   an Adam optimizer and a finite-difference gradient checker.
//! * [`equivariant`] — dimension-aware gated layers whose outputs co-scale
//!   with their inputs under space/time/magnitude rescaling, plus an
//!   orthogonal-equivariant variant for vector features.
//! * [`data`] — closed-form reference trajectories and seeded dataset
//!   generation.
//! * [`metrics`], [`train`] — evaluation metrics and the training loop.
//! * [`propcheck`] — executable structural property checks (conservation,
//!   flux symmetry, equivariance) used by the CLI and the acceptance suite.
//! * [`tolerances`] — every numeric tolerance and frozen reference constant
//!   used by tests and checks, in one audited place.
//!
//! All numerics are `f64`. Every randomized routine takes an explicit seed
//! and is deterministic for a fixed seed, including file output down to the
//! byte level.

// Validation guards are written as negated comparisons (`!(x > 0.0)`) on
// purpose: the negation makes NaN fail the guard, which `x <= 0.0` would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod equivariant;
pub mod fvm;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod propcheck;
pub mod tolerances;
pub mod train;

pub(crate) mod f17;
pub(crate) mod pool;
