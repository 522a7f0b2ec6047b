//! Holomorphic symplectic form from logarithmic derivatives of the
//! coordinates over a moduli patch, metric extraction at `zeta = -1`, the
//! closed-form semiflat metric for comparison, and the decay sweep that
//! measures the exponential approach between the two.
//!
//! The 2-form is `varpi = (1/8 pi^2 R) sum eps_ij dlogX_i ^ dlogX_j` with
//! the fiberwise differential taken by central finite differences in the
//! real patch coordinates `(Re u, Im u, theta)`; the twistor decomposition
//! `varpi = -(i/2 zeta) w_+ + w_I - (i/2) zeta w_-` turns samples at
//! `zeta in {-1, 1, i}` into the Kaehler forms, and
//! `g(v, w) = w_I(v, I w)` with `I = -(w_J)^{-1} w_K` recovers the metric.

use crate::lattice::{
    tba_solve, Charge, ChargeLattice, GeneratorData, LatticeError, SpectrumData, TbaOpts,
};
use crate::linalg::Mat;
use crate::numerics::bessel_k;
use crate::C;
use num_complex::Complex64;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("invalid patch: {0}")]
    InvalidPatch(String),
    #[error("finite-difference displacement crosses a BPS ray (distance {dist:.2e}); use a smaller step or different zeta")]
    RayCrossed { dist: f64 },
    #[error("omega_J is singular at this patch point")]
    SingularOmegaJ,
    #[error("patch is not Lagrangian: |sum eps dZ^dZ| = {0:.3e}")]
    NotLagrangian(f64),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Central charges as affine-linear holomorphic functions of the base
/// coordinates: `Z_i(u) = sum_j M[i][j] u_j + c_i`.
#[derive(Clone, Debug)]
pub struct CentralChargeMap {
    pub matrix: Vec<Vec<C>>,
    pub offset: Vec<C>,
}

impl CentralChargeMap {
    pub fn eval(&self, i: usize, u: &[C]) -> C {
        let mut z = self.offset[i];
        for (j, &uj) in u.iter().enumerate() {
            z += self.matrix[i][j] * uj;
        }
        z
    }
}

/// A local patch of the moduli space: base coordinates `u in C^r`, fiber
/// angles matched to the lattice generators, and the data defining the
/// spectra over the patch.
#[derive(Clone, Debug)]
pub struct ModuliPatch {
    pub lattice: ChargeLattice,
    pub base_dim: usize,
    pub charges: CentralChargeMap,
    pub omega: Vec<i64>,
    pub sigma: Vec<i8>,
    pub r: f64,
}

/// A point of the patch.
#[derive(Clone, Debug)]
pub struct PatchPoint {
    pub u: Vec<C>,
    pub theta: Vec<f64>,
}

impl ModuliPatch {
    pub fn rank(&self) -> usize {
        self.lattice.rank
    }

    /// Real coordinates: `Re u_1..Re u_r, Im u_1..Im u_r, theta_1..`.
    pub fn real_dim(&self) -> usize {
        2 * self.base_dim + self.rank()
    }

    pub fn validate(&self, point: &PatchPoint) -> Result<(), MetricError> {
        if point.u.len() != self.base_dim || point.theta.len() != self.rank() {
            return Err(MetricError::InvalidPatch(
                "point dimensions do not match the patch".into(),
            ));
        }
        if self.omega.len() != self.rank() || self.sigma.len() != self.rank() {
            return Err(MetricError::InvalidPatch(
                "omega/sigma must have one entry per generator".into(),
            ));
        }
        // Lagrangian input check: sum eps_ij dZ_i ^ dZ_j = 0 by finite
        // differences over the base coordinates
        let h = 1e-5;
        let eps = inverse_pairing(&self.lattice)?;
        let mut worst = 0.0f64;
        let nb = 2 * self.base_dim;
        let mut dz = vec![vec![Complex64::new(0.0, 0.0); nb]; self.rank()];
        for (i, row) in dz.iter_mut().enumerate() {
            for (m, slot) in row.iter_mut().enumerate() {
                let up = displace_u(&point.u, m, h);
                let dn = displace_u(&point.u, m, -h);
                *slot = (self.charges.eval(i, &up) - self.charges.eval(i, &dn)) / (2.0 * h);
            }
        }
        for m in 0..nb {
            for n in 0..nb {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..self.rank() {
                    for j in 0..self.rank() {
                        acc += eps[i * self.rank() + j] * (dz[i][m] * dz[j][n]);
                    }
                }
                worst = worst.max(acc.norm());
            }
        }
        if worst > 1e-6 {
            return Err(MetricError::NotLagrangian(worst));
        }
        Ok(())
    }

    /// Spectrum at a point; differentiation uses the unwrapped angle lifts.
    pub fn spectrum_at(&self, point: &PatchPoint) -> SpectrumData {
        let generators = (0..self.rank())
            .map(|i| GeneratorData {
                z: self.charges.eval(i, &point.u),
                theta: point.theta[i],
                omega: self.omega[i],
                sigma: self.sigma[i],
            })
            .collect();
        SpectrumData {
            lattice: self.lattice.clone(),
            generators,
            extra_support: vec![],
        }
    }

    pub fn displace(&self, point: &PatchPoint, coord: usize, h: f64) -> PatchPoint {
        let mut p = point.clone();
        let nb = 2 * self.base_dim;
        if coord < nb {
            p.u = displace_u(&p.u, coord, h);
        } else {
            p.theta[coord - nb] += h;
        }
        p
    }
}

fn displace_u(u: &[C], m: usize, h: f64) -> Vec<C> {
    let mut v = u.to_vec();
    let r = u.len();
    if m < r {
        v[m] += h;
    } else {
        v[m - r] += Complex64::new(0.0, h);
    }
    v
}

fn inverse_pairing(lattice: &ChargeLattice) -> Result<Vec<C>, MetricError> {
    let n = lattice.rank;
    let m = Mat::from_fn(n, |i, j| lattice.pairing[i * n + j] as f64);
    let inv = m
        .inverse(1e-12)
        .ok_or_else(|| MetricError::InvalidPatch("pairing matrix is singular".into()))?;
    Ok((0..n * n)
        .map(|k| Complex64::new(inv.a[k], 0.0))
        .collect())
}

/// Complex-valued 2-form over the real patch coordinates, stored with
/// exact antisymmetry (strict upper triangle only).
#[derive(Clone, Debug)]
pub struct TwoForm {
    pub n: usize,
    upper: Vec<C>,
}

impl TwoForm {
    pub fn from_full(n: usize, full: &[C]) -> TwoForm {
        let mut upper = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                upper.push((full[i * n + j] - full[j * n + i]) * 0.5);
            }
        }
        TwoForm { n, upper }
    }

    pub fn get(&self, i: usize, j: usize) -> C {
        use std::cmp::Ordering;
        match i.cmp(&j) {
            Ordering::Equal => Complex64::new(0.0, 0.0),
            Ordering::Less => self.upper[upper_index(self.n, i, j)],
            Ordering::Greater => -self.upper[upper_index(self.n, j, i)],
        }
    }

    pub fn add(&self, other: &TwoForm) -> TwoForm {
        TwoForm {
            n: self.n,
            upper: self
                .upper
                .iter()
                .zip(&other.upper)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scale(&self, s: C) -> TwoForm {
        TwoForm {
            n: self.n,
            upper: self.upper.iter().map(|a| a * s).collect(),
        }
    }

    pub fn sub(&self, other: &TwoForm) -> TwoForm {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn norm(&self) -> f64 {
        (2.0 * self.upper.iter().map(|a| a.norm_sqr()).sum::<f64>()).sqrt()
    }

    pub fn real_mat(&self) -> Mat {
        Mat::from_fn(self.n, |i, j| self.get(i, j).re)
    }

    pub fn max_imag(&self) -> f64 {
        self.upper.iter().map(|a| a.im.abs()).fold(0.0, f64::max)
    }
}

fn upper_index(n: usize, i: usize, j: usize) -> usize {
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Options for the form assembly.
#[derive(Clone, Copy, Debug)]
pub struct VarpiOpts {
    /// Finite-difference step (relative to the coordinate scale).
    pub h: f64,
    pub tba: TbaOpts,
    /// Required angular clearance of zeta from every active ray.
    pub ray_guard: f64,
}

impl Default for VarpiOpts {
    fn default() -> Self {
        VarpiOpts {
            h: 1e-4,
            tba: TbaOpts::default(),
            ray_guard: 1e-3,
        }
    }
}

fn log_x_all(
    patch: &ModuliPatch,
    point: &PatchPoint,
    zeta: C,
    opts: &VarpiOpts,
) -> Result<Vec<C>, MetricError> {
    let spectrum = patch.spectrum_at(point);
    let sol = tba_solve(&spectrum, patch.r, &opts.tba)?;
    if let Some((_, dist)) = sol.ray_distance(zeta) {
        if dist < opts.ray_guard && !sol.rays.is_empty() {
            return Err(MetricError::RayCrossed { dist });
        }
    }
    (0..patch.rank())
        .map(|i| {
            sol.log_x(&Charge::unit(patch.rank(), i), zeta, None)
                .map_err(MetricError::from)
        })
        .collect()
}

/// Gradient of `log X_{gamma_i}` in every real patch coordinate by central
/// differences with one Richardson refinement.
fn dlog_x(
    patch: &ModuliPatch,
    point: &PatchPoint,
    zeta: C,
    opts: &VarpiOpts,
) -> Result<Vec<Vec<C>>, MetricError> {
    let dim = patch.real_dim();
    let rank = patch.rank();
    let mut grads = vec![vec![Complex64::new(0.0, 0.0); dim]; rank];
    for m in 0..dim {
        let d_at = |h: f64| -> Result<Vec<C>, MetricError> {
            let plus = log_x_all(patch, &patch.displace(point, m, h), zeta, opts)?;
            let minus = log_x_all(patch, &patch.displace(point, m, -h), zeta, opts)?;
            Ok(plus
                .iter()
                .zip(&minus)
                .map(|(p, q)| (p - q) / (2.0 * h))
                .collect())
        };
        let d1 = d_at(opts.h)?;
        let d2 = d_at(opts.h / 2.0)?;
        for i in 0..rank {
            grads[i][m] = (d2[i] * 4.0 - d1[i]) / 3.0;
        }
    }
    Ok(grads)
}

/// The holomorphic symplectic form
/// `varpi(zeta) = (1/8 pi^2 R) sum eps_ij dlogX_i ^ dlogX_j`.
pub fn varpi(
    patch: &ModuliPatch,
    point: &PatchPoint,
    zeta: C,
    opts: &VarpiOpts,
) -> Result<TwoForm, MetricError> {
    patch.validate(point)?;
    let grads = dlog_x(patch, point, zeta, opts)?;
    assemble_varpi(patch, &grads)
}

fn assemble_varpi(patch: &ModuliPatch, grads: &[Vec<C>]) -> Result<TwoForm, MetricError> {
    let dim = patch.real_dim();
    let rank = patch.rank();
    let eps = inverse_pairing(&patch.lattice)?;
    let norm = 1.0 / (8.0 * std::f64::consts::PI * std::f64::consts::PI * patch.r);
    let mut full = vec![Complex64::new(0.0, 0.0); dim * dim];
    for m in 0..dim {
        for n in 0..dim {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..rank {
                for j in 0..rank {
                    acc += eps[i * rank + j] * (grads[i][m] * grads[j][n]);
                }
            }
            full[m * dim + n] = acc * norm;
        }
    }
    Ok(TwoForm::from_full(dim, &full))
}

/// Semiflat gradients in closed form: `dlogX^L_i = pi R dZ_i / zeta +
/// i dtheta_i + pi R zeta d(conj Z_i)`, with `dZ` by finite differences of
/// the supplied charge functions.
fn semiflat_grads(patch: &ModuliPatch, point: &PatchPoint, zeta: C, h: f64) -> Vec<Vec<C>> {
    let dim = patch.real_dim();
    let rank = patch.rank();
    let nb = 2 * patch.base_dim;
    let pr = std::f64::consts::PI * patch.r;
    let mut grads = vec![vec![Complex64::new(0.0, 0.0); dim]; rank];
    for (i, row) in grads.iter_mut().enumerate() {
        for (m, slot) in row.iter_mut().enumerate() {
            if m < nb {
                let up = displace_u(&point.u, m, h);
                let dn = displace_u(&point.u, m, -h);
                let dz = (patch.charges.eval(i, &up) - patch.charges.eval(i, &dn)) / (2.0 * h);
                *slot = dz * (pr / zeta) + dz.conj() * (pr * zeta);
            } else if m - nb == i {
                *slot = Complex64::new(0.0, 1.0);
            }
        }
    }
    grads
}

/// Semiflat holomorphic symplectic form in closed form.
pub fn varpi_semiflat(
    patch: &ModuliPatch,
    point: &PatchPoint,
    zeta: C,
    h: f64,
) -> Result<TwoForm, MetricError> {
    let grads = semiflat_grads(patch, point, zeta, h);
    assemble_varpi(patch, &grads)
}

/// Result of the metric extraction.
pub struct ExtractedMetric {
    pub g: Mat,
    pub omega_i: Mat,
    pub omega_j: Mat,
    pub omega_k: Mat,
    pub complex_structure: Mat,
    /// `|g - g^T| / |g|` before symmetrization.
    pub asymmetry: f64,
    /// `max |I^2 + id|` entry.
    pub i_squared_residual: f64,
    pub eigenvalues: Vec<f64>,
}

/// Extract the Kaehler forms from varpi samples at `zeta = -1, 1, i` and
/// build `g = w_I(., I.)` with `I = -(w_J)^{-1} w_K`; the overall sign of
/// `I` is calibrated on the semiflat patch.
pub fn extract_metric(
    patch: &ModuliPatch,
    point: &PatchPoint,
    opts: &VarpiOpts,
) -> Result<ExtractedMetric, MetricError> {
    patch.validate(point)?;
    let w_m1 = varpi(patch, point, Complex64::new(-1.0, 0.0), opts)?;
    let w_p1 = varpi(patch, point, Complex64::new(1.0, 0.0), opts)?;
    let w_i = varpi(patch, point, Complex64::new(0.0, 1.0), opts)?;
    let sign = calibration_sign(patch, point, opts.h)?;
    extract_from_samples(&w_m1, &w_p1, &w_i, sign)
}

/// Closed-form semiflat metric via the identical extraction route.
pub fn semiflat_metric(
    patch: &ModuliPatch,
    point: &PatchPoint,
    h: f64,
) -> Result<ExtractedMetric, MetricError> {
    let w_m1 = varpi_semiflat(patch, point, Complex64::new(-1.0, 0.0), h)?;
    let w_p1 = varpi_semiflat(patch, point, Complex64::new(1.0, 0.0), h)?;
    let w_i = varpi_semiflat(patch, point, Complex64::new(0.0, 1.0), h)?;
    let sign = calibration_sign(patch, point, h)?;
    extract_from_samples(&w_m1, &w_p1, &w_i, sign)
}

/// Sign calibration: the semiflat run must produce a positive definite
/// metric; the resulting sign is shared by the corrected extraction.
fn calibration_sign(patch: &ModuliPatch, point: &PatchPoint, h: f64) -> Result<f64, MetricError> {
    let w_m1 = varpi_semiflat(patch, point, Complex64::new(-1.0, 0.0), h)?;
    let w_p1 = varpi_semiflat(patch, point, Complex64::new(1.0, 0.0), h)?;
    let w_i = varpi_semiflat(patch, point, Complex64::new(0.0, 1.0), h)?;
    let trial = extract_from_samples(&w_m1, &w_p1, &w_i, 1.0)?;
    let tr: f64 = (0..trial.g.n).map(|k| trial.g[(k, k)]).sum();
    Ok(if tr >= 0.0 { 1.0 } else { -1.0 })
}

fn extract_from_samples(
    w_m1: &TwoForm,
    w_p1: &TwoForm,
    w_i: &TwoForm,
    sign: f64,
) -> Result<ExtractedMetric, MetricError> {
    // varpi(-1) = w_I + i w_J, varpi(1) = w_I - i w_J, varpi(i) = w_I - i w_K
    let omega_i_c = w_m1.add(w_p1).scale(Complex64::new(0.5, 0.0));
    let omega_j_c = w_m1.sub(w_p1).scale(Complex64::new(0.0, -0.5));
    let omega_k_c = w_i.sub(&omega_i_c).scale(Complex64::new(0.0, 1.0));
    let omega_i = omega_i_c.real_mat();
    let omega_j = omega_j_c.real_mat();
    let omega_k = omega_k_c.real_mat();

    let inv_j = omega_j.inverse(1e-10).ok_or(MetricError::SingularOmegaJ)?;
    let mut i_mat = inv_j.matmul(&omega_k).scale(-1.0);
    if sign < 0.0 {
        i_mat = i_mat.scale(-1.0);
    }
    let n = i_mat.n;
    let i2 = i_mat.matmul(&i_mat);
    let mut i2_res = 0.0f64;
    for a in 0..n {
        for b in 0..n {
            let want = if a == b { -1.0 } else { 0.0 };
            i2_res = i2_res.max((i2[(a, b)] - want).abs());
        }
    }
    let g_raw = omega_i.matmul(&i_mat);
    let g_sym = g_raw.add(&g_raw.transpose()).scale(0.5);
    let asym = g_raw.sub(&g_raw.transpose()).frobenius() / g_raw.frobenius().max(1e-300);
    let eigenvalues = g_sym.sym_eigenvalues();
    Ok(ExtractedMetric {
        g: g_sym,
        omega_i,
        omega_j,
        omega_k,
        complex_structure: i_mat,
        asymmetry: asym,
        i_squared_residual: i2_res,
        eigenvalues,
    })
}

/// One row of the decay sweep.
#[derive(Clone, Debug)]
pub struct DecaySample {
    pub r: f64,
    pub diff_norm: f64,
    pub envelope: f64,
    pub converged: bool,
}

/// Per-R distance between the corrected and semiflat metrics, the fitted
/// log-slope, and the Bessel envelope comparison.
pub struct DecaySweep {
    pub samples: Vec<DecaySample>,
    pub slope: Option<f64>,
    pub target_rate: f64,
    pub z_min: f64,
    pub envelope_constant: f64,
}

pub fn decay_sweep(
    patch: &ModuliPatch,
    point: &PatchPoint,
    r_values: &[f64],
    opts: &VarpiOpts,
) -> Result<DecaySweep, MetricError> {
    let mut samples = Vec::new();
    let spectrum = patch.spectrum_at(point);
    let z_min = spectrum
        .active_charges()
        .iter()
        .map(|g| spectrum.central_charge(g).norm())
        .fold(f64::INFINITY, f64::min);
    let mut pts = Vec::new();
    for &r in r_values {
        let mut p = patch.clone();
        p.r = r;
        let pair = (
            extract_metric(&p, point, opts),
            semiflat_metric(&p, point, opts.h),
        );
        let (twist, sf) = match pair {
            (Ok(t), Ok(s)) => (t, s),
            _ => {
                samples.push(DecaySample {
                    r,
                    diff_norm: f64::NAN,
                    envelope: f64::NAN,
                    converged: false,
                });
                continue;
            }
        };
        let diff = twist.g.sub(&sf.g).frobenius();
        samples.push(DecaySample {
            r,
            diff_norm: diff,
            envelope: 0.0,
            converged: true,
        });
        if diff > 0.0 && z_min.is_finite() {
            pts.push((r, diff.ln()));
        }
    }
    let slope = if pts.len() >= 2 {
        Some(least_squares_slope(&pts))
    } else {
        None
    };
    // single envelope constant: geometric mean of diff / (K0 + K1)
    let mut log_c = Vec::new();
    for s in &samples {
        if s.converged && z_min.is_finite() && s.diff_norm > 0.0 {
            let arg = 2.0 * std::f64::consts::PI * s.r * z_min;
            let k01 = bessel_k(0, arg).unwrap_or(0.0) + bessel_k(1, arg).unwrap_or(0.0);
            if k01 > 0.0 {
                log_c.push((s.diff_norm / k01).ln());
            }
        }
    }
    let envelope_constant = if log_c.is_empty() {
        0.0
    } else {
        (log_c.iter().sum::<f64>() / log_c.len() as f64).exp()
    };
    for s in &mut samples {
        if s.converged {
            let arg = 2.0 * std::f64::consts::PI * s.r * z_min;
            let k01 = bessel_k(0, arg).unwrap_or(0.0) + bessel_k(1, arg).unwrap_or(0.0);
            s.envelope = envelope_constant * k01;
        }
    }
    Ok(DecaySweep {
        samples,
        slope,
        target_rate: -2.0 * std::f64::consts::PI * z_min,
        z_min,
        envelope_constant,
    })
}

pub fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// A rank-2 patch with one electric ray, used across the tests and the
/// bundled configurations: `Z_1 = u`, `Z_2 = i u`, `Omega(+-gamma_1) = 1`.
pub fn one_ray_patch(r: f64) -> (ModuliPatch, PatchPoint) {
    let patch = ModuliPatch {
        lattice: ChargeLattice::new(2, vec![0, 1, -1, 0]).expect("valid"),
        base_dim: 1,
        charges: CentralChargeMap {
            matrix: vec![
                vec![Complex64::new(1.0, 0.0)],
                vec![Complex64::new(0.0, 1.0)],
            ],
            offset: vec![Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)],
        },
        omega: vec![1, 0],
        sigma: vec![-1, -1],
        r,
    };
    let point = PatchPoint {
        u: vec![Complex64::from_polar(1.0, 0.9)],
        theta: vec![0.4, 1.1],
    };
    (patch, point)
}

/// The same patch with the instanton corrections switched off.
pub fn semiflat_patch(r: f64) -> (ModuliPatch, PatchPoint) {
    let (mut patch, point) = one_ray_patch(r);
    patch.omega = vec![0, 0];
    (patch, point)
}
