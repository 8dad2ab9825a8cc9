//! Discretised fractional s-harmonic maps into spheres.
//!
//! The lattice module truncates R^n to a box with a domain mask; every other
//! module works with node sums weighted by h^n and pair sums weighted by the
//! precomputed kernel table.

pub mod analysis;
pub mod constants;
pub mod error;
pub mod extension;
pub mod field;
pub mod identities;
pub mod lattice;
pub mod nonlocal;
pub mod quadrature;
pub mod solver;
pub mod weighted_pde;

pub use error::{Error, Result};
