use super::gauss::GaussLegendre;
use super::{to_f64, NumericsError, Quadrature, Scalar};
use num_complex::Complex;

/// Integration contour: an ordered polyline or a circle.
#[derive(Clone, Debug)]
pub enum ContourPath<S> {
    /// At least two nodes, traversed in order.
    Polyline(Vec<Complex<S>>),
    /// Full circle; `orientation` is `+1` counter-clockwise, `-1` clockwise.
    Circle {
        center: Complex<S>,
        radius: S,
        orientation: i8,
    },
}

impl<S: Scalar> ContourPath<S> {
    pub fn validate(&self) -> Result<(), NumericsError> {
        match self {
            ContourPath::Polyline(nodes) if nodes.len() < 2 => Err(NumericsError::InvalidSettings(
                "polyline contour needs at least 2 nodes".into(),
            )),
            ContourPath::Circle { radius, .. } if !(*radius > S::zero()) => Err(
                NumericsError::InvalidSettings("circle contour needs a positive radius".into()),
            ),
            _ => Ok(()),
        }
    }
}

fn eval<S: Scalar, F: FnMut(S) -> Complex<S>>(
    f: &mut F,
    gl: &GaussLegendre<S>,
    a: S,
    b: S,
) -> Result<Complex<S>, NumericsError> {
    let half = (b - a) * S::of(0.5);
    let mid = (a + b) * S::of(0.5);
    let mut acc = Complex::new(S::zero(), S::zero());
    for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
        let t = mid + half * x;
        let v = f(t);
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(NumericsError::NonFinite { at: to_f64(t) });
        }
        acc = acc + v * w;
    }
    Ok(acc * half)
}

/// Adaptive Gauss quadrature of a complex-valued function on `[a, b]`.
///
/// Returns the integral together with an error estimate. The estimate is the
/// accumulated difference between each accepted interval and its bisection.
pub fn integrate_finite<S: Scalar, F: FnMut(S) -> Complex<S>>(
    mut f: F,
    a: S,
    b: S,
    quad: &Quadrature<S>,
) -> Result<(Complex<S>, S), NumericsError> {
    quad.validate()?;
    if a == b {
        return Ok((Complex::new(S::zero(), S::zero()), S::zero()));
    }
    let gl = GaussLegendre::new(15);
    integrate_finite_with(&mut f, a, b, quad, &gl)
}

pub(crate) fn integrate_finite_with<S: Scalar, F: FnMut(S) -> Complex<S>>(
    f: &mut F,
    a: S,
    b: S,
    quad: &Quadrature<S>,
    gl: &GaussLegendre<S>,
) -> Result<(Complex<S>, S), NumericsError> {
    let total_width = (b - a).abs();
    let whole = eval(f, gl, a, b)?;
    let scale = quad.abs_tol.max(quad.rel_tol * whole.norm());
    let min_width = total_width * S::epsilon() * S::of(16.0);

    let mut stack = vec![(a, b, whole)];
    let mut acc = Complex::new(S::zero(), S::zero());
    let mut err_acc = S::zero();
    let mut used = 0usize;
    let mut exhausted = false;

    while let Some((lo, hi, coarse)) = stack.pop() {
        let mid = (lo + hi) * S::of(0.5);
        let left = eval(f, gl, lo, mid)?;
        let right = eval(f, gl, mid, hi)?;
        let fine = left + right;
        let e = (coarse - fine).norm();
        let frac = (hi - lo).abs() / total_width;
        if e <= scale * frac || (hi - lo).abs() <= min_width || exhausted {
            acc = acc + fine;
            err_acc = err_acc + e;
        } else {
            used += 1;
            if used >= quad.max_subdivisions {
                exhausted = true;
            }
            stack.push((lo, mid, left));
            stack.push((mid, hi, right));
        }
    }

    if exhausted && err_acc > quad.abs_tol.max(quad.rel_tol * acc.norm()) {
        return Err(NumericsError::NoConvergence {
            subdivisions: used,
            value_re: to_f64(acc.re),
            value_im: to_f64(acc.im),
            err: to_f64(err_acc),
        });
    }
    Ok((acc, err_acc))
}

/// Integral of `f` over `[t0, infinity)`.
///
/// The tail is truncated where the integrand magnitude has dropped below
/// `tail_cutoff` times the running magnitude estimate, then the remaining
/// finite interval is mapped onto `[0, 1)` and integrated adaptively. The
/// caller guarantees integrability; the truncation allowance is folded into
/// the reported error.
pub fn integrate_semi_infinite<S: Scalar, F: FnMut(S) -> Complex<S>>(
    mut f: F,
    t0: S,
    quad: &Quadrature<S>,
) -> Result<(Complex<S>, S), NumericsError> {
    quad.validate()?;

    // Probe on a geometric ladder to find the truncation point.
    let f0 = f(t0);
    if !f0.re.is_finite() || !f0.im.is_finite() {
        return Err(NumericsError::NonFinite { at: to_f64(t0) });
    }
    let mut cum = f0.norm();
    let mut t_cut = t0 + S::one();
    let mut quiet = 0u32;
    for k in 0..64u32 {
        let d = S::of(2.0f64.powi(k as i32));
        let t = t0 + d;
        let v = f(t);
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(NumericsError::NonFinite { at: to_f64(t) });
        }
        let contrib = v.norm() * d;
        if contrib <= quad.tail_cutoff * cum {
            quiet += 1;
            if quiet >= 2 {
                t_cut = t;
                break;
            }
        } else {
            quiet = 0;
            cum = cum + contrib;
        }
        t_cut = t;
    }

    // Map [t0, t_cut] onto [0, u_cut] by t = t0 + u/(1-u).
    let span = t_cut - t0;
    let u_cut = span / (S::one() + span);
    let gl = GaussLegendre::new(15);
    let mut g = |u: S| {
        let om = S::one() - u;
        let t = t0 + u / om;
        f(t) / (om * om)
    };
    let (value, err) = integrate_finite_with(&mut g, S::zero(), u_cut, quad, &gl)?;
    let tail_allow = quad.tail_cutoff * cum.max(value.norm());
    Ok((value, err + tail_allow))
}

/// Contour integral of `f` along `path`.
///
/// `exclusions` lists declared singularities; the integral is refused when
/// the path passes within `exclusion_radius` of one of them.
pub fn integrate_contour<S: Scalar, F: FnMut(Complex<S>) -> Complex<S>>(
    mut f: F,
    path: &ContourPath<S>,
    quad: &Quadrature<S>,
    exclusions: &[Complex<S>],
    exclusion_radius: S,
) -> Result<(Complex<S>, S), NumericsError> {
    quad.validate()?;
    path.validate()?;
    let gl = GaussLegendre::new(15);
    let mut total = Complex::new(S::zero(), S::zero());
    let mut err = S::zero();
    match path {
        ContourPath::Polyline(nodes) => {
            for seg in nodes.windows(2) {
                let (za, zb) = (seg[0], seg[1]);
                for &s in exclusions {
                    let d = dist_point_segment(s, za, zb);
                    if d < exclusion_radius {
                        return Err(NumericsError::SingularityTooClose {
                            dist: to_f64(d),
                            sing_re: to_f64(s.re),
                            sing_im: to_f64(s.im),
                            radius: to_f64(exclusion_radius),
                        });
                    }
                }
                let dz = zb - za;
                let mut g = |u: S| f(za + dz * u) * dz;
                let (v, e) = integrate_finite_with(&mut g, S::zero(), S::one(), quad, &gl)?;
                total = total + v;
                err = err + e;
            }
        }
        ContourPath::Circle {
            center,
            radius,
            orientation,
        } => {
            let s = S::of(*orientation as f64);
            for &sing in exclusions {
                let d = ((sing - center).norm() - *radius).abs();
                if d < exclusion_radius {
                    return Err(NumericsError::SingularityTooClose {
                        dist: to_f64(d),
                        sing_re: to_f64(sing.re),
                        sing_im: to_f64(sing.im),
                        radius: to_f64(exclusion_radius),
                    });
                }
            }
            let i = Complex::new(S::zero(), S::one());
            let mut g = |th: S| {
                let w = (i * s * th).exp() * *radius;
                f(center + w) * i * s * w
            };
            let (v, e) =
                integrate_finite_with(&mut g, S::zero(), S::of(2.0) * S::PI(), quad, &gl)?;
            total = total + v;
            err = err + e;
        }
    }
    Ok((total, err))
}

fn dist_point_segment<S: Scalar>(p: Complex<S>, a: Complex<S>, b: Complex<S>) -> S {
    let ab = b - a;
    let len2 = ab.norm_sqr();
    if len2 == S::zero() {
        return (p - a).norm();
    }
    let t = ((p - a).re * ab.re + (p - a).im * ab.im) / len2;
    let t = t.max(S::zero()).min(S::one());
    (p - (a + ab * t)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn exponential_tail() {
        let quad = Quadrature::default();
        let (v, e) = integrate_semi_infinite(|t: f64| c((-t).exp(), 0.0), 0.0, &quad).unwrap();
        assert!((v.re - 1.0).abs() < 1e-10, "value {v}, err {e}");
        assert!(v.im.abs() < 1e-14);
    }

    #[test]
    fn cosh_kernel_is_k0_of_one() {
        let quad = Quadrature::with_tols(1e-13, 1e-13);
        let (v, _) =
            integrate_semi_infinite(|t: f64| c((-t.cosh()).exp(), 0.0), 0.0, &quad).unwrap();
        assert!((v.re - 0.42102443824070834).abs() < 1e-12);
    }

    #[test]
    fn zero_integrand() {
        let quad = Quadrature::default();
        let (v, _) = integrate_semi_infinite(|_: f64| c(0.0, 0.0), 0.0, &quad).unwrap();
        assert_eq!(v, c(0.0, 0.0));
    }

    #[test]
    fn residue_of_one_over_z() {
        let quad = Quadrature::default();
        let path = ContourPath::Circle {
            center: c(0.0, 0.0),
            radius: 1.0,
            orientation: 1,
        };
        let (v, _) = integrate_contour(|z| 1.0 / z, &path, &quad, &[], 0.0).unwrap();
        assert!((v - c(0.0, 2.0 * PI)).norm() < 1e-10);
    }

    #[test]
    fn closed_polyline_of_entire_function() {
        let quad = Quadrature::default();
        let sq = vec![c(1.0, 1.0), c(-1.0, 1.0), c(-1.0, -1.0), c(1.0, -1.0), c(1.0, 1.0)];
        let (v, _) =
            integrate_contour(|_| c(1.0, 0.0), &ContourPath::Polyline(sq), &quad, &[], 0.0)
                .unwrap();
        assert!(v.norm() < 1e-12);
    }

    #[test]
    fn singularity_exclusion_fires() {
        let quad = Quadrature::default();
        let path = ContourPath::Polyline(vec![c(-1.0, 0.1), c(1.0, 0.1)]);
        let r = integrate_contour(|z| 1.0 / z, &path, &quad, &[c(0.0, 0.0)], 0.5);
        assert!(matches!(r, Err(NumericsError::SingularityTooClose { .. })));
    }

    #[test]
    fn nan_is_reported() {
        let quad = Quadrature::default();
        let r = integrate_finite(|t: f64| c((t - 0.5).ln(), 0.0), 0.0, 1.0, &quad);
        assert!(matches!(r, Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn error_estimates_bound_true_error_on_corpus() {
        // 20 analytically integrable functions on [0, 2]
        let quad = Quadrature::with_tols(1e-11, 1e-11);
        let cases: Vec<(Box<dyn Fn(f64) -> f64>, f64)> = vec![
            (Box::new(|_| 1.0), 2.0),
            (Box::new(|x| x), 2.0),
            (Box::new(|x| x * x), 8.0 / 3.0),
            (Box::new(|x| x.powi(5)), 64.0 / 6.0),
            (Box::new(|x| x.exp()), 2f64.exp() - 1.0),
            (Box::new(|x| (-x).exp()), 1.0 - (-2f64).exp()),
            (Box::new(|x| x.sin()), 1.0 - 2f64.cos()),
            (Box::new(|x| x.cos()), 2f64.sin()),
            (Box::new(|x| (5.0 * x).sin()), (1.0 - (10f64).cos()) / 5.0),
            (Box::new(|x| (20.0 * x).cos()), (40f64).sin() / 20.0),
            (Box::new(|x| 1.0 / (1.0 + x * x)), 2f64.atan()),
            (Box::new(|x| x / (1.0 + x * x)), 0.5 * 5f64.ln()),
            (Box::new(|x| (x * x).exp() * 2.0 * x), (4f64).exp() - 1.0),
            (Box::new(|x| (1.0 + x).ln()), 3.0 * 3f64.ln() - 2.0),
            (Box::new(|x| x.sqrt()), 2.0 * 2f64.sqrt() * 2.0 / 3.0),
            (Box::new(|x| (-x * x).exp() * x), 0.5 * (1.0 - (-4f64).exp())),
            (Box::new(|x| x * x.cos()), 2.0 * 2f64.sin() + 2f64.cos() - 1.0),
            (Box::new(|x| 1.0 / (2.0 + x.sin())), {
                // antiderivative 2/sqrt(3) atan((2 tan(x/2)+1)/sqrt(3))
                let f = |x: f64| 2.0 / 3f64.sqrt() * ((2.0 * (x / 2.0).tan() + 1.0) / 3f64.sqrt()).atan();
                f(2.0) - f(0.0)
            }),
            (Box::new(|x| x.exp() * x.sin()), {
                let f = |x: f64| 0.5 * x.exp() * (x.sin() - x.cos());
                f(2.0) - f(0.0)
            }),
            (Box::new(|x| (3.0 * x).exp()), ((6f64).exp() - 1.0) / 3.0),
        ];
        assert_eq!(cases.len(), 20);
        for (k, (f, exact)) in cases.iter().enumerate() {
            let (v, e) = integrate_finite(|x| c(f(x), 0.0), 0.0, 2.0, &quad).unwrap();
            let true_err = (v.re - exact).abs();
            assert!(
                true_err <= e + 1e-13,
                "case {k}: true error {true_err} exceeds estimate {e}"
            );
            assert!(true_err < 1e-9, "case {k}: {} vs {}", v.re, exact);
        }
    }
}
