//! Kalman-Bucy filtering under drift ambiguity.
//!
//! The toolkit simulates linear signal/observation systems whose drifts are
//! known only up to a bounded Girsanov shift, prices that ambiguity with a
//! convex penalty (the concave dual of a BSDE generator), computes worst-case
//! priors and the corresponding robust minimum-mean-square filters with
//! certified duality gaps, and solves the conditional MMSE problem under
//! general convex operators on finite probability spaces.
//!
//! Module map:
//! - [`model`]: coefficients, time grid, ambiguity bound, validation.
//! - [`sim`]: path simulation under any prior, density paths, mixture and
//!   moment checks.
//! - [`kalman`]: Riccati solver, classical filter, discrete oracle.
//! - [`gexp`]: generators, concave duals, penalties, BSDE and dual values.
//! - [`robust`]: worst-case prior, robust filter, decomposition, saddle
//!   certification.
//! - [`particle`]: particle evaluation of the general filter for feedback
//!   priors.
//! - [`mmse`]: finite-space conditional MMSE under a convex operator.

pub mod config;
pub mod error;
pub mod gexp;
pub mod kalman;
pub mod linalg;
pub mod mmse;
pub mod model;
pub mod opt;
pub mod particle;
pub mod robust;
pub mod sim;

pub use error::{Error, Result};
