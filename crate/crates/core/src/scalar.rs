//! Scalar precision selection.
//!
//! Storage is 32-bit by default; the `f64` feature switches the whole crate
//! to 64-bit scalars, which tightens the gradient-check and reconstruction
//! tolerances below. Checkpoint files always hold 32-bit little-endian
//! scalars regardless of the build.

#[cfg(not(feature = "f64"))]
pub type Scalar = f32;
#[cfg(feature = "f64")]
pub type Scalar = f64;

/// Worst relative error accepted by finite-difference gradient checks.
#[cfg(not(feature = "f64"))]
pub const GRAD_CHECK_TOL: Scalar = 1e-3;
#[cfg(feature = "f64")]
pub const GRAD_CHECK_TOL: Scalar = 1e-5;

/// Central-difference step used by gradient checks.
#[cfg(not(feature = "f64"))]
pub const GRAD_CHECK_STEP: Scalar = 1e-3;
#[cfg(feature = "f64")]
pub const GRAD_CHECK_STEP: Scalar = 1e-5;

/// Absolute tolerance for wavelet perfect reconstruction.
#[cfg(not(feature = "f64"))]
pub const RECON_TOL: Scalar = 1e-6;
#[cfg(feature = "f64")]
pub const RECON_TOL: Scalar = 1e-12;

/// Relative tolerance for wavelet energy conservation.
pub const ENERGY_REL_TOL: Scalar = 1e-5;

/// Slack added to the attack epsilon when checking ball membership.
pub const EPS_BALL_SLACK: Scalar = 1e-6;
