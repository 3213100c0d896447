//! Numerical laboratory for chordal SLE boundary proximity.
//!
//! The crate simulates chordal SLE_kappa through the discretized Loewner
//! evolution and checks the closed-form hitting laws, martingale
//! identities, integral boundedness criteria, and dimension results that
//! govern how close the curve comes to the positive real axis.
//!
//! Module map:
//! - [`loewner`]: driving path generation, exact vertical-slit stepping of
//!   boundary points, swallow detection, zipper trace reconstruction.
//! - [`specfun`]: Gamma, Gauss 2F1 (Euler integral + series), regularized
//!   incomplete beta, and the exact hitting probabilities built from them.
//! - [`criterion`]: boundary functions h, the Lambda transform, and the
//!   integral test classifying the curve/graph intersection as bounded or
//!   unbounded.
//! - [`observables`]: the local martingale M^x_t, threshold stopping,
//!   pair observables, the integral supermartingale Z_t, and the Q
//!   statistic.
//! - [`mc`]: seeded, mergeable Monte Carlo experiments over all of the
//!   above.

pub mod criterion;
pub mod error;
pub mod loewner;
pub mod mc;
pub mod observables;
pub mod specfun;

pub use error::Error;

/// Boundary proximity exponent 8/kappa - 1.
pub fn s_kappa(kappa: f64) -> f64 {
    8.0 / kappa - 1.0
}
