//! Dipole-measurement electrical impedance tomography for a small elliptical
//! conductivity anomaly inside the unit disc.
//!
//! A dipole placed at `(cos φ, sin φ)` on the boundary produces a background
//! potential whose squared gradient is the kernel `K = 1/S²`, with `S` the
//! squared distance to the dipole. Linearised boundary data for an anomaly `D`
//! is `I(D; φ) = ∫_D K dx`. The crate provides:
//!
//! * [`model`]: the kernel, its derivatives and the three forward maps
//!   (area-only, quadratic Taylor over the ellipse, polarization tensor);
//! * [`oracle`]: brute-force quadrature of the exact kernel over the ellipse;
//! * [`geometry`]: direct recovery of centre and area from three measurements
//!   by intersecting Apollonius circles;
//! * [`stability`]: closed-form Jacobians, the uniqueness determinant and the
//!   inverse-norm bound, and condition numbers;
//! * [`oed`]: Bayesian (nested Monte Carlo expected information gain) and
//!   deterministic (reciprocal condition number) experiment design, plus a
//!   Metropolis–Hastings posterior sampler;
//! * [`newton`]: five-parameter recovery by truncated pseudo-inverse Newton
//!   iteration seeded by the geometric inversion.

pub mod error;
pub mod geometry;
pub mod model;
pub mod newton;
pub mod oed;
pub mod oracle;
pub mod rng;
pub mod stability;

pub use error::{EitError, Result};
pub use model::{
    DesignAngles, EllipseAnomaly, EllipseParams, GaussianPrior3, MeasurementSet, NoiseKind,
    NoiseModel, SymmetricDesign,
};
