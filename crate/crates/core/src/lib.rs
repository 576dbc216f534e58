//! Numerical laboratory for the random conductance model on finite lattices.
//!
//! The crate covers lattice graphs ([`lattice`]), conductance environments and
//! speed measures ([`environment`]), discrete calculus and integrability norms
//! ([`calculus`]), the intrinsic metric with its comparison and optimality
//! diagnostics ([`metric`]), heat kernels by uniformization and Monte Carlo
//! ([`heat_kernel`]), and the acceptance checks that tie them together
//! ([`acceptance`]).

// Negated comparisons reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod acceptance;
pub mod calculus;
pub mod environment;
pub mod error;
pub mod heat_kernel;
pub mod lattice;
pub mod metric;
pub mod oracle;
pub mod stats;

pub use error::{Error, Result};
