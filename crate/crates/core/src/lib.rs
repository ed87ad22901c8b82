//! Doubly stochastic residual mixing for multi-stream residual networks.
//!
//! Two ways of producing the `n x n` residual mixing matrix are implemented
//! side by side:
//!
//! * Sinkhorn–Knopp projection of an exponentiated logit matrix
//!   ([`sinkhorn`], [`hyperblock::Variant::Mhc`]), which is only
//!   approximately doubly stochastic after a finite number of iterations;
//! * an exact convex combination of all `n!` permutation matrices
//!   ([`birkhoff`], [`hyperblock::Variant::MhcLite`]).
//!
//! [`grad`] supplies analytic gradients checked against finite differences,
//! [`toytrain`] a small training harness, and [`analyze`] the stability
//! statistics used to compare the two.

pub mod analyze;
pub mod birkhoff;
pub mod cli;
pub mod error;
pub mod grad;
pub mod hyperblock;
pub mod matcore;
pub mod sinkhorn;
pub mod toytrain;

pub use error::{Error, Result};
pub use matcore::{DSError, Mat};
