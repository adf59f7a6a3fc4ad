//! Phase-field tumour-growth simulation and parameter identification.
//!
//! The crate provides a P1 finite-element solver for a Cahn-Hilliard
//! system coupled to a nutrient equation (proliferation, chemotaxis and
//! consumption driven by three scalar parameters), exact discrete
//! sensitivities and adjoints of the scheme, and a trust-region
//! Gauss-Newton loop that recovers the parameters from observations of
//! the phase field.

pub mod error;
pub mod fem;
pub mod forward;
pub mod linalg;
pub mod linearized;
pub mod mesh;
pub mod model;
pub mod objective;

pub use error::{Error, Result};
