//! Allocation of atoms to the sites of a periodic grid.
//!
//! Energies come from a quadratic form over placement indicators; solvers
//! range from greedy descent and simulated annealing to a graph network
//! trained through a Gumbel-Sinkhorn relaxation, with exhaustive enumeration
//! as the reference on small instances.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classical;
pub mod energy;
pub mod gnt;
pub mod graphs;
pub mod error;
pub mod experiment;
pub mod model;
pub mod oracle;
pub mod par;
pub mod result;

pub use error::{Error, Result};
