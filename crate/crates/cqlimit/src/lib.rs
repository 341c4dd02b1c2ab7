//! Classical-quantum dynamics in the double-scaling limit.
//!
//! The crate builds the completely positive classical-quantum generator for an
//! operator-valued Hamiltonian `H(q, p)`, integrates it on a phase-space grid and
//! unravels it into coupled classical/quantum stochastic trajectories.

pub mod cli;
pub mod cq_generator;
pub mod cq_hamiltonian;
pub mod error;
pub mod evolvers;
pub mod operator_algebra;
pub mod par;
pub mod phase_space;
pub mod unravelling;

pub use error::{CqError, Result};
pub use num_complex::Complex64;
