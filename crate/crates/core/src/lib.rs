//! Numerical toolkit for quadratic-differential trajectories, Volterra
//! initial-value problems at infinity, canonical (Fock-Goncharov-type)
//! coordinates, TBA-style Riemann-Hilbert integral equations and twistorial
//! hyperkahler metric assembly.
//!
//! The crate is organised along the computational chain:
//!
//! * [`numerics`] - adaptive quadrature, modified Bessel functions and the
//!   Cauchy kernel; generic over the scalar type.
//! * [`quaddiff`] - rational quadratic differentials, trajectory tracing,
//!   classification, periods and saddle scanning.
//! * [`volterra`] - linear Volterra equations of the second kind with the
//!   initial value at infinity, finite-interval variants and
//!   parameter-derivative equations.
//! * [`sections`] - small flat sections of the family of flat connections
//!   built from a synthetic local model, transport across quadrilaterals and
//!   the canonical coordinate with its leading exponential.
//! * [`lattice`] - charge lattices, semiflat coordinates, BPS rays, jump
//!   factors and the fixed-point solution of the coordinate integral
//!   equation.
//! * [`metric`] - the holomorphic symplectic form from logarithmic
//!   derivatives, metric extraction at `zeta = -1` and decay measurement
//!   against the semiflat metric.
//! * [`config`] / [`export`] - run configuration schema and CSV/JSON/SVG
//!   artifact writers shared with the command line driver.

pub mod config;
pub mod export;
pub mod lattice;
pub mod linalg;
pub mod metric;
pub mod numerics;
pub mod quaddiff;
pub mod sections;
pub mod volterra;

/// Scalar used by the concrete pipelines (trajectories, TBA, metric).
pub type Real = f64;
/// Complex number over [`Real`].
pub type C = num_complex::Complex<f64>;

/// Imaginary unit over [`Real`].
pub const I: C = C::new(0.0, 1.0);
