//! Adaptive quadrature on finite, semi-infinite and contour domains,
//! modified Bessel functions of the second kind and the Cauchy kernel.
//!
//! Everything here is generic over the scalar type; the concrete
//! pipelines instantiate it at `f64` through the crate-root aliases.

mod adaptive;
mod bessel;
mod gauss;

pub use adaptive::{integrate_contour, integrate_finite, integrate_semi_infinite, ContourPath};
pub use bessel::bessel_k;
pub use gauss::GaussLegendre;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Tolerance and budget settings for the integrators.
#[derive(Clone, Copy, Debug)]
pub struct Quadrature<S> {
    /// Absolute tolerance on the integral value.
    pub abs_tol: S,
    /// Relative tolerance against the integral magnitude.
    pub rel_tol: S,
    /// Maximum number of interval subdivisions.
    pub max_subdivisions: usize,
    /// Truncation threshold for semi-infinite tails.
    pub tail_cutoff: S,
}

impl<S: Scalar> Default for Quadrature<S> {
    fn default() -> Self {
        Quadrature {
            abs_tol: S::of(1e-10),
            rel_tol: S::of(1e-9),
            max_subdivisions: 4000,
            tail_cutoff: S::of(1e-12),
        }
    }
}

impl<S: Scalar> Quadrature<S> {
    pub fn with_tols(abs_tol: S, rel_tol: S) -> Self {
        Quadrature {
            abs_tol,
            rel_tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.abs_tol > S::zero()) || !(self.rel_tol > S::zero()) {
            return Err(NumericsError::InvalidSettings(
                "quadrature tolerances must be positive".into(),
            ));
        }
        if self.max_subdivisions < 1 {
            return Err(NumericsError::InvalidSettings(
                "max_subdivisions must be at least 1".into(),
            ));
        }
        if !(self.tail_cutoff > S::zero()) {
            return Err(NumericsError::InvalidSettings(
                "tail_cutoff must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("invalid quadrature settings: {0}")]
    InvalidSettings(String),
    #[error("integrand returned a non-finite value near parameter {at}")]
    NonFinite { at: f64 },
    #[error("quadrature did not converge after {subdivisions} subdivisions; best estimate {value_re}+{value_im}i with error {err}")]
    NoConvergence {
        subdivisions: usize,
        value_re: f64,
        value_im: f64,
        err: f64,
    },
    #[error("contour passes within {dist} of declared singularity at {sing_re}+{sing_im}i (exclusion radius {radius})")]
    SingularityTooClose {
        dist: f64,
        sing_re: f64,
        sing_im: f64,
        radius: f64,
    },
    #[error("bessel_k order must be 0 or 1, got {0}")]
    BadOrder(usize),
    #[error("bessel_k requires x > 0, got {0}")]
    BesselDomain(f64),
    #[error("cauchy kernel pole: zeta' = {0} coincides with {1}")]
    CauchyPole(String, String),
}

impl NumericsError {
    /// Best value carried by a non-convergence error, if any.
    pub fn best_estimate(&self) -> Option<(f64, f64, f64)> {
        match self {
            NumericsError::NoConvergence {
                value_re,
                value_im,
                err,
                ..
            } => Some((*value_re, *value_im, *err)),
            _ => None,
        }
    }
}

/// Cauchy-type kernel `(1/zeta') * (zeta' + zeta) / (zeta' - zeta)`.
///
/// The two pole locations are rejected; callers integrating across a ray
/// must offset the evaluation point themselves.
pub fn cauchy_kernel<S: Scalar>(
    zeta_prime: Complex<S>,
    zeta: Complex<S>,
) -> Result<Complex<S>, NumericsError> {
    if zeta_prime == Complex::new(S::zero(), S::zero()) {
        return Err(NumericsError::CauchyPole(
            format!("{zeta_prime}"),
            "0".into(),
        ));
    }
    if zeta_prime == zeta {
        return Err(NumericsError::CauchyPole(
            format!("{zeta_prime}"),
            format!("{zeta}"),
        ));
    }
    Ok((zeta_prime + zeta) / (zeta_prime * (zeta_prime - zeta)))
}

pub(crate) fn to_f64<S: Scalar>(x: S) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn cauchy_kernel_values() {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        assert_eq!(cauchy_kernel(one, zero).unwrap(), one);
        assert_eq!(
            cauchy_kernel(one, Complex64::new(-1.0, 0.0)).unwrap(),
            zero
        );
        // (2i, i) -> (1/2i)(3i/i) = -1.5i
        let v = cauchy_kernel(Complex64::new(0.0, 2.0), Complex64::new(0.0, 1.0)).unwrap();
        assert!((v - Complex64::new(0.0, -1.5)).norm() < 1e-15);
    }

    #[test]
    fn cauchy_kernel_poles_rejected() {
        let z = Complex64::new(0.3, 0.4);
        assert!(cauchy_kernel(Complex64::new(0.0, 0.0), z).is_err());
        assert!(cauchy_kernel(z, z).is_err());
    }

    #[test]
    fn cauchy_kernel_reflection_identities() {
        // product of the kernel with its zeta-reflection is exactly 1/zeta'^2,
        // and the sum is 2(zeta'^2+zeta^2)/(zeta'(zeta'^2-zeta^2)), which
        // reduces to 2/zeta' only in the zeta -> 0 limit.
        for (a, b, c, d) in [
            (1.3, -0.2, 0.5, 0.7),
            (0.1, 2.0, -1.0, 0.3),
            (-2.0, 0.9, 0.2, -0.4),
        ] {
            let zp = Complex64::new(a, b);
            let z = Complex64::new(c, d);
            let kp = cauchy_kernel(zp, z).unwrap();
            let km = cauchy_kernel(zp, -z).unwrap();
            let prod_rhs = 1.0 / (zp * zp);
            assert!((kp * km - prod_rhs).norm() < 1e-13 * prod_rhs.norm().max(1.0));
            let sum_rhs = 2.0 * (zp * zp + z * z) / (zp * (zp * zp - z * z));
            assert!((kp + km - sum_rhs).norm() < 1e-13 * sum_rhs.norm().max(1.0));
        }
        // the stated small-zeta limit of the sum
        let zp = Complex64::new(0.7, -1.1);
        let z = Complex64::new(1e-8, -2e-8);
        let sum = cauchy_kernel(zp, z).unwrap() + cauchy_kernel(zp, -z).unwrap();
        assert!((sum - 2.0 / zp).norm() < 1e-13);
    }
}
