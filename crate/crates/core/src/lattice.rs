//! Charge lattice with DT-type invariants and quadratic refinement,
//! semiflat coordinates, BPS rays and the fixed-point solution of the
//! coordinate integral equation
//!
//! ```text
//! X_g(zeta) = X^sf_g(zeta) *
//!   exp[ -(1/4 pi i) sum_b Omega(b) <g,b> int_{l_b} (dz'/z') (z'+zeta)/(z'-zeta) log(1 - sigma(b) X_b(z')) ]
//! ```
//!
//! Internally the tables store the sign-stripped exponential (the quadratic
//! refinement carries every sign), so logarithms stay additive in the charge
//! and multiplicativity holds without bookkeeping. Ray integrals switch to a
//! pole-subtracted form near the ray so one-sided Plemelj limits can be
//! evaluated accurately.

use crate::numerics::{bessel_k, integrate_finite, Quadrature};
use crate::{C, I};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LatticeError {
    #[error("invalid spectrum: {0}")]
    Invalid(String),
    #[error("quadratic refinement identity violated for charges {0:?} and {1:?}")]
    RefinementViolated(Vec<i64>, Vec<i64>),
    #[error("|X_b| = {magnitude:.4} >= 1 on ray of {charge:?}; increase R")]
    BranchCondition { charge: Vec<i64>, magnitude: f64 },
    #[error("iteration not contracting: sup-change failed to decrease for {stalled} steps (last {last:.3e})")]
    NotContracting { stalled: usize, last: f64 },
    #[error("iteration exceeded {0} steps")]
    IterationLimit(usize),
    #[error("evaluation point at angle {angle:.3e} of ray {ray:?} requires a side hint")]
    NeedSideHint { ray: Vec<i64>, angle: f64 },
    #[error("two non-proportional active charges share a ray (wall configuration): {0:?}, {1:?}")]
    WallConfiguration(Vec<i64>, Vec<i64>),
}

/// Integer charge in generator coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Charge(pub Vec<i64>);

impl Charge {
    pub fn unit(rank: usize, i: usize) -> Self {
        let mut v = vec![0i64; rank];
        v[i] = 1;
        Charge(v)
    }

    pub fn neg(&self) -> Self {
        Charge(self.0.iter().map(|x| -x).collect())
    }

    pub fn add(&self, other: &Charge) -> Self {
        Charge(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0)
    }
}

/// Finite-rank lattice with an antisymmetric integer pairing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChargeLattice {
    pub rank: usize,
    /// Row-major `rank x rank` antisymmetric integer matrix.
    pub pairing: Vec<i64>,
}

impl ChargeLattice {
    pub fn new(rank: usize, pairing: Vec<i64>) -> Result<Self, LatticeError> {
        if pairing.len() != rank * rank {
            return Err(LatticeError::Invalid(format!(
                "pairing must be {rank}x{rank}"
            )));
        }
        for i in 0..rank {
            for j in 0..rank {
                if pairing[i * rank + j] != -pairing[j * rank + i] {
                    return Err(LatticeError::Invalid(
                        "pairing matrix must be antisymmetric".into(),
                    ));
                }
            }
        }
        Ok(ChargeLattice { rank, pairing })
    }

    pub fn pair(&self, a: &Charge, b: &Charge) -> i64 {
        let mut acc = 0i64;
        for i in 0..self.rank {
            for j in 0..self.rank {
                acc += a.0[i] * b.0[j] * self.pairing[i * self.rank + j];
            }
        }
        acc
    }
}

/// Data attached to one lattice generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorData {
    pub z: C,
    pub theta: f64,
    pub omega: i64,
    pub sigma: i8,
}

/// Central charges, angles, DT invariants and quadratic refinement.
#[derive(Clone, Debug)]
pub struct SpectrumData {
    pub lattice: ChargeLattice,
    pub generators: Vec<GeneratorData>,
    /// Non-generator support entries (charge, Omega).
    pub extra_support: Vec<(Charge, i64)>,
}

impl SpectrumData {
    pub fn validate(&self) -> Result<(), LatticeError> {
        if self.generators.len() != self.lattice.rank {
            return Err(LatticeError::Invalid(
                "one generator entry per lattice rank required".into(),
            ));
        }
        for g in &self.generators {
            if g.sigma != 1 && g.sigma != -1 {
                return Err(LatticeError::Invalid("sigma values must be +-1".into()));
            }
        }
        for (c, _) in &self.extra_support {
            if c.0.len() != self.lattice.rank {
                return Err(LatticeError::Invalid("support charge has wrong rank".into()));
            }
        }
        Ok(())
    }

    pub fn central_charge(&self, gamma: &Charge) -> C {
        gamma
            .0
            .iter()
            .zip(&self.generators)
            .map(|(&n, g)| g.z * n as f64)
            .sum()
    }

    pub fn angle(&self, gamma: &Charge) -> f64 {
        gamma
            .0
            .iter()
            .zip(&self.generators)
            .map(|(&n, g)| g.theta * n as f64)
            .sum()
    }

    /// Quadratic refinement extended from the generators by
    /// `sigma(a+b) = sigma(a) sigma(b) (-1)^{<a,b>}`; the closed form below
    /// is path independent, which the tests verify by brute force.
    pub fn sigma(&self, gamma: &Charge) -> i8 {
        let mut sign = 1i8;
        for (i, &n) in gamma.0.iter().enumerate() {
            if n.rem_euclid(2) == 1 {
                sign *= self.generators[i].sigma;
            }
        }
        let rank = self.lattice.rank;
        let mut cross = 0i64;
        for i in 0..rank {
            for j in i + 1..rank {
                cross += gamma.0[i] * gamma.0[j] * self.lattice.pairing[i * rank + j];
            }
        }
        if cross.rem_euclid(2) == 1 {
            sign = -sign;
        }
        sign
    }

    /// DT invariant with symmetrized support: `Omega(-g) = Omega(g)`.
    pub fn omega(&self, gamma: &Charge) -> i64 {
        for (i, g) in self.generators.iter().enumerate() {
            let unit = Charge::unit(self.lattice.rank, i);
            if *gamma == unit || *gamma == unit.neg() {
                return g.omega;
            }
        }
        for (c, om) in &self.extra_support {
            if gamma == c || *gamma == c.neg() {
                return *om;
            }
        }
        0
    }

    /// All charges with nonzero DT invariant, both signs included.
    pub fn active_charges(&self) -> Vec<Charge> {
        let mut out = Vec::new();
        for (i, g) in self.generators.iter().enumerate() {
            if g.omega != 0 {
                let c = Charge::unit(self.lattice.rank, i);
                out.push(c.neg());
                out.push(c);
            }
        }
        for (c, om) in &self.extra_support {
            if *om != 0 {
                out.push(c.clone());
                out.push(c.neg());
            }
        }
        out
    }

    /// Logarithm of the sign-stripped semiflat coordinate:
    /// `pi R Z_g / zeta + i theta_g + pi R zeta conj(Z_g)`.
    pub fn log_x_semiflat(&self, gamma: &Charge, zeta: C, r: f64) -> C {
        let z = self.central_charge(gamma);
        let th = self.angle(gamma);
        let pr = std::f64::consts::PI * r;
        z * (pr / zeta) + I * th + z.conj() * (pr * zeta)
    }

    /// Signed semiflat coordinate `sigma(g) exp(...)`; for saddle-type
    /// generators (`sigma = -1`) this is the `-exp` form.
    pub fn x_semiflat(&self, gamma: &Charge, zeta: C, r: f64) -> C {
        self.log_x_semiflat(gamma, zeta, r).exp() * self.sigma(gamma) as f64
    }
}

/// Extend the refinement to an arbitrary charge and check the identity on a
/// sample of decompositions.
pub fn sigma_extend(spectrum: &SpectrumData, gamma: &Charge) -> Result<i8, LatticeError> {
    spectrum.validate()?;
    let rank = spectrum.lattice.rank;
    for i in 0..rank {
        let e = Charge::unit(rank, i);
        let sum = gamma.add(&e);
        let lhs = spectrum.sigma(gamma) as i64 * spectrum.sigma(&e) as i64;
        let pair = spectrum.lattice.pair(gamma, &e);
        let rhs = spectrum.sigma(&sum) as i64 * if pair.rem_euclid(2) == 1 { -1 } else { 1 };
        if lhs != rhs {
            return Err(LatticeError::RefinementViolated(gamma.0.clone(), e.0));
        }
    }
    Ok(spectrum.sigma(gamma))
}

/// Sampled logarithmic state of one active BPS ray.
#[derive(Clone, Debug)]
pub struct RayTable {
    pub charge: Charge,
    pub z: C,
    pub psi: f64,
    pub sigma: i8,
    pub omega: i64,
    pub y_max: f64,
    pub y_nodes: Vec<f64>,
    /// `log(1 - sigma X_b)` at the nodes.
    pub log_vals: Vec<C>,
    /// Instanton correction `log(X_b / X^sf_b)` at the nodes.
    pub corr_vals: Vec<C>,
}

impl RayTable {
    fn node_zeta(&self, y: f64) -> C {
        -Complex64::from_polar(y.exp(), self.psi)
    }

    /// Cubic interpolation of the stored log values; zero outside the grid
    /// (the integrand is double-exponentially small there).
    pub fn log_at(&self, y: f64) -> C {
        interp_uniform(&self.y_nodes, &self.log_vals, y)
    }

    /// Stripped coordinate on the ray recovered from the stored logarithm.
    pub fn x_on_ray(&self, y: f64) -> C {
        (1.0 - self.log_at(y).exp()) * self.sigma as f64
    }
}

fn interp_uniform(xs: &[f64], vals: &[C], x: f64) -> C {
    let n = xs.len();
    if x <= xs[0] || x >= xs[n - 1] {
        return Complex64::new(0.0, 0.0);
    }
    let h = xs[1] - xs[0];
    let j = (((x - xs[0]) / h) as usize).min(n - 2);
    let width = 4.min(n);
    let lo = j.saturating_sub(1).min(n - width);
    let mut out = Complex64::new(0.0, 0.0);
    for pos in 0..width {
        let i = lo + pos;
        let mut l = 1.0;
        for q in 0..width {
            let k = lo + q;
            if q != pos {
                l *= (x - xs[k]) / (xs[i] - xs[k]);
            }
        }
        out += vals[i] * l;
    }
    out
}

/// Ray discretization: uniform rapidity grid on `[-Y, Y]` with
/// `Y = arccosh(log(1/eps_tail)/(2 pi R |Z|)) + 1` and trapezoid weights;
/// the cosh weight makes the truncated tail negligible.
#[derive(Clone, Copy, Debug)]
pub struct RayGrid {
    pub eps_tail: f64,
    pub target_spacing: f64,
    pub min_nodes: usize,
}

impl Default for RayGrid {
    fn default() -> Self {
        RayGrid {
            eps_tail: 1e-12,
            target_spacing: 0.04,
            min_nodes: 129,
        }
    }
}

impl RayGrid {
    fn y_max(&self, r: f64, z_abs: f64) -> f64 {
        let arg = ((1.0 / self.eps_tail).ln() / (2.0 * std::f64::consts::PI * r * z_abs)).max(1.0);
        arg.acosh() + 1.0
    }

    fn nodes(&self, y_max: f64) -> Vec<f64> {
        let mut n = ((2.0 * y_max / self.target_spacing).ceil() as usize).max(self.min_nodes - 1);
        if n % 2 == 1 {
            n += 1;
        }
        (0..=n)
            .map(|k| -y_max + 2.0 * y_max * k as f64 / n as f64)
            .collect()
    }
}

/// Which one-sided limit to take on an active ray.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    CounterClockwise,
    Clockwise,
}

/// Converged state of the integral equation.
#[derive(Clone, Debug)]
pub struct TbaSolution {
    pub spectrum: SpectrumData,
    pub r: f64,
    pub rays: Vec<RayTable>,
    pub iterations: usize,
    pub sup_changes: Vec<f64>,
    /// Geometric tail bound reported for truncated ring-domain towers.
    pub tower_tail_bound: Option<f64>,
}

/// Options for the fixed-point iteration.
#[derive(Clone, Copy, Debug)]
pub struct TbaOpts {
    pub tol: f64,
    pub max_iters: usize,
    pub grid: RayGrid,
}

impl Default for TbaOpts {
    fn default() -> Self {
        TbaOpts {
            tol: 1e-12,
            max_iters: 60,
            grid: RayGrid::default(),
        }
    }
}

/// Relative angular guard inside which evaluation requires a side hint.
pub const POLE_GUARD_ANGLE: f64 = 1e-6;
/// Angular distance below which the pole-subtracted integral is used.
const NEAR_RAY_ANGLE: f64 = 0.2;
/// Offset used for one-sided Richardson extrapolation onto a ray.
const SIDE_OFFSET: f64 = 1e-4;

/// Solve the integral equation by iteration from the semiflat coordinates.
pub fn tba_solve(
    spectrum: &SpectrumData,
    r: f64,
    opts: &TbaOpts,
) -> Result<TbaSolution, LatticeError> {
    spectrum.validate()?;
    let active = spectrum.active_charges();

    // wall check: non-proportional active charges must not share a ray
    for i in 0..active.len() {
        for j in i + 1..active.len() {
            let zi = spectrum.central_charge(&active[i]);
            let zj = spectrum.central_charge(&active[j]);
            let cross = zi.re * zj.im - zi.im * zj.re;
            let dot = zi.re * zj.re + zi.im * zj.im;
            if cross.abs() < 1e-12 * zi.norm() * zj.norm() && dot > 0.0 {
                let parallel_charge = {
                    // proportional as lattice vectors?
                    let (a, b) = (&active[i].0, &active[j].0);
                    let mut ratio: Option<(i64, i64)> = None;
                    let mut ok = true;
                    for (&x, &y) in a.iter().zip(b) {
                        if x == 0 && y == 0 {
                            continue;
                        }
                        match ratio {
                            None => ratio = Some((x, y)),
                            Some((p, q)) => {
                                if x * q != y * p {
                                    ok = false;
                                }
                            }
                        }
                    }
                    ok
                };
                if !parallel_charge {
                    return Err(LatticeError::WallConfiguration(
                        active[i].0.clone(),
                        active[j].0.clone(),
                    ));
                }
            }
        }
    }

    let mut rays: Vec<RayTable> = Vec::new();
    for gamma in &active {
        let z = spectrum.central_charge(gamma);
        if z.norm() == 0.0 {
            return Err(LatticeError::Invalid(format!(
                "active charge {gamma:?} has vanishing central charge"
            )));
        }
        let y_max = opts.grid.y_max(r, z.norm());
        let y_nodes = opts.grid.nodes(y_max);
        let sigma = spectrum.sigma(gamma);
        let psi = z.arg();
        let mut log_vals = Vec::with_capacity(y_nodes.len());
        for &y in &y_nodes {
            let zeta = -Complex64::from_polar(y.exp(), psi);
            let u = spectrum.log_x_semiflat(gamma, zeta, r).exp();
            if u.norm() >= 1.0 {
                return Err(LatticeError::BranchCondition {
                    charge: gamma.0.clone(),
                    magnitude: u.norm(),
                });
            }
            log_vals.push((1.0 - u * sigma as f64).ln());
        }
        rays.push(RayTable {
            charge: gamma.clone(),
            z,
            psi,
            sigma,
            omega: spectrum.omega(gamma),
            y_max,
            corr_vals: vec![Complex64::new(0.0, 0.0); y_nodes.len()],
            y_nodes,
            log_vals,
        });
    }

    let mut solution = TbaSolution {
        spectrum: spectrum.clone(),
        r,
        rays,
        iterations: 0,
        sup_changes: vec![],
        tower_tail_bound: None,
    };

    let mut stalled = 0usize;
    let mut last = f64::INFINITY;
    for iter in 1..=opts.max_iters {
        let mut change = 0.0f64;
        let mut new_logs: Vec<Vec<C>> = Vec::with_capacity(solution.rays.len());
        let mut new_corrs: Vec<Vec<C>> = Vec::with_capacity(solution.rays.len());
        for ray in &solution.rays {
            let mut logs = Vec::with_capacity(ray.y_nodes.len());
            let mut corrs = Vec::with_capacity(ray.y_nodes.len());
            for (k, &y) in ray.y_nodes.iter().enumerate() {
                let zeta = ray.node_zeta(y);
                let corr = log_correction_tables(&solution, &ray.charge, zeta);
                let u = spectrum.log_x_semiflat(&ray.charge, zeta, r) + corr;
                let xv = u.exp();
                if xv.norm() >= 1.0 {
                    return Err(LatticeError::BranchCondition {
                        charge: ray.charge.0.clone(),
                        magnitude: xv.norm(),
                    });
                }
                let lv = (1.0 - xv * ray.sigma as f64).ln();
                change = change.max((lv - ray.log_vals[k]).norm());
                logs.push(lv);
                corrs.push(corr);
            }
            new_logs.push(logs);
            new_corrs.push(corrs);
        }
        for (ray, (logs, corrs)) in solution
            .rays
            .iter_mut()
            .zip(new_logs.into_iter().zip(new_corrs))
        {
            ray.log_vals = logs;
            ray.corr_vals = corrs;
        }
        solution.iterations = iter;
        solution.sup_changes.push(change);
        if change < opts.tol {
            return Ok(solution);
        }
        if change >= last {
            stalled += 1;
            if stalled >= 5 {
                return Err(LatticeError::NotContracting {
                    stalled,
                    last: change,
                });
            }
        } else {
            stalled = 0;
        }
        last = change;
    }
    Err(LatticeError::IterationLimit(opts.max_iters))
}

/// Trapezoid integral of one ray against the Cauchy factor, used away from
/// the ray. The rapidity parametrization absorbs the `d zeta'/zeta'`
/// measure, so the integrand is `(zeta'+zeta)/(zeta'-zeta) * L(y)`.
fn ray_integral_far(ray: &RayTable, zeta: C) -> C {
    let h = ray.y_nodes[1] - ray.y_nodes[0];
    let n = ray.y_nodes.len();
    let mut acc = Complex64::new(0.0, 0.0);
    for (k, &y) in ray.y_nodes.iter().enumerate() {
        let zp = ray.node_zeta(y);
        let factor = (zp + zeta) / (zp - zeta);
        let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        acc += factor * ray.log_vals[k] * (w * h);
    }
    acc
}

/// Pole-subtracted integral for `zeta` within [`NEAR_RAY_ANGLE`] of the
/// ray: the Cauchy factor splits as `1 + 2 zeta/(zeta' - zeta)`; the
/// residue part integrates in closed form (the principal log's cut lies
/// exactly on the ray, producing the correct one-sided limits), and the
/// subtracted remainder is integrated adaptively on the interpolated table.
fn ray_integral_near(ray: &RayTable, zeta: C) -> C {
    let y_lo = ray.y_nodes[0];
    let y_hi = *ray.y_nodes.last().unwrap();
    let h = ray.y_nodes[1] - ray.y_nodes[0];
    let n = ray.y_nodes.len();

    let mut plain = Complex64::new(0.0, 0.0);
    for (k, lv) in ray.log_vals.iter().enumerate() {
        let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        plain += lv * (w * h);
    }

    let zeta_hat = -Complex64::from_polar(1.0, ray.psi);
    let w = zeta / zeta_hat;
    let y0 = w.norm().ln();
    let l0 = if y0 > y_lo && y0 < y_hi {
        ray.log_at(y0)
    } else {
        Complex64::new(0.0, 0.0)
    };

    let quad = Quadrature::<f64>::with_tols(1e-13, 1e-12);
    let f = |y: f64| -> C {
        let zp = zeta_hat * y.exp();
        let den = zp - zeta;
        if den.norm() < 1e-290 {
            Complex64::new(0.0, 0.0)
        } else {
            (ray.log_at(y) - l0) * 2.0 * zeta / den
        }
    };
    let (rest, _) =
        integrate_finite(f, y_lo, y_hi, &quad).unwrap_or((Complex64::new(0.0, 0.0), 0.0));

    let a = zeta_hat * y_hi.exp() - zeta;
    let b = zeta_hat * y_lo.exp() - zeta;
    let kernel = ((a / b).ln() - (y_hi - y_lo)) * 2.0;

    plain + rest + l0 * kernel
}

fn ray_integral(ray: &RayTable, zeta: C) -> C {
    let zeta_hat = -Complex64::from_polar(1.0, ray.psi);
    let w = zeta / zeta_hat;
    if w.arg().abs() < NEAR_RAY_ANGLE && w.norm().ln().abs() < ray.y_max + 1.0 {
        ray_integral_near(ray, zeta)
    } else {
        ray_integral_far(ray, zeta)
    }
}

/// Instanton correction `log(X_g / X^sf_g)(zeta)` from the stored tables.
fn log_correction_tables(solution: &TbaSolution, gamma: &Charge, zeta: C) -> C {
    let mut acc = Complex64::new(0.0, 0.0);
    for ray in &solution.rays {
        let pairing = solution.spectrum.lattice.pair(gamma, &ray.charge);
        if pairing == 0 || ray.omega == 0 {
            continue;
        }
        acc += ray_integral(ray, zeta) * (ray.omega * pairing) as f64;
    }
    // -(1/4 pi i) prefactor
    -acc / Complex64::new(0.0, 4.0 * std::f64::consts::PI)
}

impl TbaSolution {
    /// Nearest active ray and the angular distance to it.
    pub fn ray_distance(&self, zeta: C) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (k, ray) in self.rays.iter().enumerate() {
            let ang = angle_diff(zeta.arg(), ray.psi + std::f64::consts::PI);
            if best.map_or(true, |(_, d)| ang < d) {
                best = Some((k, ang));
            }
        }
        best
    }

    /// Correction `log(X_g/X^sf_g)` at `zeta`, honoring the pole guard: on
    /// a ray a side hint is required and the one-sided value is produced by
    /// Richardson extrapolation of offset evaluations.
    pub fn log_correction(
        &self,
        gamma: &Charge,
        zeta: C,
        side: Option<Side>,
    ) -> Result<C, LatticeError> {
        if let Some((k, ang)) = self.ray_distance(zeta) {
            if ang < POLE_GUARD_ANGLE {
                let Some(side) = side else {
                    return Err(LatticeError::NeedSideHint {
                        ray: self.rays[k].charge.0.clone(),
                        angle: ang,
                    });
                };
                let sgn = match side {
                    Side::CounterClockwise => 1.0,
                    Side::Clockwise => -1.0,
                };
                let rot = |d: f64| zeta * Complex64::from_polar(1.0, sgn * d);
                let f1 = log_correction_tables(self, gamma, rot(SIDE_OFFSET));
                let f2 = log_correction_tables(self, gamma, rot(SIDE_OFFSET / 2.0));
                // linear Richardson in the offset
                return Ok(f2 * 2.0 - f1);
            }
        }
        Ok(log_correction_tables(self, gamma, zeta))
    }

    /// Logarithm of the sign-stripped coordinate.
    pub fn log_x(&self, gamma: &Charge, zeta: C, side: Option<Side>) -> Result<C, LatticeError> {
        Ok(self.spectrum.log_x_semiflat(gamma, zeta, self.r)
            + self.log_correction(gamma, zeta, side)?)
    }

    /// Full coordinate with the quadratic refinement as its sign.
    pub fn evaluate_x(
        &self,
        gamma: &Charge,
        zeta: C,
        side: Option<Side>,
    ) -> Result<C, LatticeError> {
        Ok(self.log_x(gamma, zeta, side)?.exp() * self.spectrum.sigma(gamma) as f64)
    }

    /// Jump factor of the ray holding `ray_charge`:
    /// `S_l^g = prod_{b: l_b = l} (1 - sigma(b) X_b)^{<g,b> Omega(b)}`.
    pub fn jump_factor(
        &self,
        ray_charge: &Charge,
        gamma: &Charge,
        zeta0: C,
    ) -> Result<C, LatticeError> {
        let target = self
            .rays
            .iter()
            .find(|r| &r.charge == ray_charge)
            .ok_or_else(|| LatticeError::Invalid(format!("no active ray for {ray_charge:?}")))?;
        let mut s = Complex64::new(1.0, 0.0);
        for ray in &self.rays {
            if angle_diff(ray.psi, target.psi) > 1e-9 {
                continue;
            }
            let y0 = zeta0.norm().ln();
            let x = ray.x_on_ray(y0);
            let factor = 1.0 - x * ray.sigma as f64;
            if factor.norm() == 0.0 {
                return Err(LatticeError::BranchCondition {
                    charge: ray.charge.0.clone(),
                    magnitude: 1.0,
                });
            }
            let expo = self.spectrum.lattice.pair(gamma, &ray.charge) * ray.omega;
            s *= factor.powi(expo as i32);
        }
        Ok(s)
    }

    /// Bessel-sum bound on the correction, assembled from the measured
    /// Cauchy-factor sup `a` and log-expansion constant `b`:
    /// `sum_b |Omega <g,b>| (a/4pi) sum_n (b^n/n) 2 K0(2 pi n R |Z_b|)`.
    pub fn correction_bound(&self, gamma: &Charge, zeta_ref: C) -> f64 {
        let mut bound = 0.0f64;
        for ray in &self.rays {
            let pairing = self.spectrum.lattice.pair(gamma, &ray.charge);
            if pairing == 0 || ray.omega == 0 {
                continue;
            }
            let mut a = 0.0f64;
            let mut b = 1.0f64;
            for (k, &y) in ray.y_nodes.iter().enumerate() {
                let zp = ray.node_zeta(y);
                a = a.max(((zp + zeta_ref) / (zp - zeta_ref)).norm());
                let kappa = (ray.corr_vals[k].exp() - 1.0).norm();
                b = b.max(1.0 + kappa);
            }
            let mut series = 0.0;
            for n in 1..=8u32 {
                let arg = 2.0 * std::f64::consts::PI * n as f64 * self.r * ray.z.norm();
                let k0 = bessel_k(0, arg).unwrap_or(0.0);
                let term = b.powi(n as i32) / n as f64 * 2.0 * k0;
                series += term;
                if term < 1e-4 * series {
                    break;
                }
            }
            bound +=
                (ray.omega * pairing).abs() as f64 * a * series / (4.0 * std::f64::consts::PI);
        }
        bound
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let d = (a - b).rem_euclid(two_pi);
    d.min(two_pi - d)
}

/// A ring-domain tower `base + m * step`; expanding it truncates the
/// support at `m_max`, and the geometric tail bound `e^{-m_max R |Z_step|}`
/// is reported alongside.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TowerSpec {
    pub base: Charge,
    pub step: Charge,
    pub omega: i64,
    pub m_max: usize,
}

/// Expand towers into explicit support entries, returning the tail bound.
pub fn expand_towers(spectrum: &mut SpectrumData, towers: &[TowerSpec], r: f64) -> Option<f64> {
    let mut tail: Option<f64> = None;
    for tower in towers {
        let z_step = spectrum.central_charge(&tower.step).norm();
        for m in 1..=tower.m_max {
            let mut c = tower.base.clone();
            for _ in 0..m {
                c = c.add(&tower.step);
            }
            spectrum.extra_support.push((c, tower.omega));
        }
        let this = (-(tower.m_max as f64) * r * z_step).exp();
        tail = Some(tail.map_or(this, |t: f64| t.max(this)));
    }
    tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C {
        Complex64::new(re, im)
    }

    /// rank 2, <g_e, g_m> = 1, Omega(+-g_e) = 1 only, Z_e = i, Z_m = 1.
    fn one_ray_spectrum() -> SpectrumData {
        SpectrumData {
            lattice: ChargeLattice::new(2, vec![0, 1, -1, 0]).unwrap(),
            generators: vec![
                GeneratorData {
                    z: c(0.0, 1.0),
                    theta: 0.0,
                    omega: 1,
                    sigma: -1,
                },
                GeneratorData {
                    z: c(1.0, 0.0),
                    theta: 0.0,
                    omega: 0,
                    sigma: -1,
                },
            ],
            extra_support: vec![],
        }
    }

    fn trivial_spectrum() -> SpectrumData {
        let mut s = one_ray_spectrum();
        s.generators[0].omega = 0;
        s
    }

    #[test]
    fn sigma_identity_and_zero() {
        let s = one_ray_spectrum();
        assert_eq!(s.sigma(&Charge(vec![0, 0])), 1);
        let g1 = Charge::unit(2, 0);
        let g2 = Charge::unit(2, 1);
        let sum = g1.add(&g2);
        let want = s.sigma(&g1) as i64
            * s.sigma(&g2) as i64
            * if s.lattice.pair(&g1, &g2).rem_euclid(2) == 1 {
                -1
            } else {
                1
            };
        assert_eq!(s.sigma(&sum) as i64, want);
        // sigma(g1) = -1, sigma(g2) = 1, <g1,g2> = 1 -> sigma(g1+g2) = 1
        let mut s2 = one_ray_spectrum();
        s2.generators[1].sigma = 1;
        assert_eq!(sigma_extend(&s2, &sum).unwrap(), 1);
    }

    #[test]
    fn sigma_path_independent_brute_force() {
        // every decomposition into unit steps gives the same refinement
        let s = one_ray_spectrum();
        let target = Charge(vec![2, 1]);
        fn walk(s: &SpectrumData, at: Charge, remaining: Vec<i64>, acc: i8, out: &mut Vec<i8>) {
            if remaining.iter().all(|&x| x == 0) {
                out.push(acc);
                return;
            }
            for i in 0..remaining.len() {
                if remaining[i] != 0 {
                    let step = if remaining[i] > 0 { 1 } else { -1 };
                    let e = {
                        let mut v = vec![0i64; remaining.len()];
                        v[i] = step;
                        Charge(v)
                    };
                    let pair = s.lattice.pair(&at, &e);
                    let mut acc2 = acc * s.sigma(&e);
                    if pair.rem_euclid(2) == 1 {
                        acc2 = -acc2;
                    }
                    let mut rem2 = remaining.clone();
                    rem2[i] -= step;
                    walk(s, at.add(&e), rem2, acc2, out);
                }
            }
        }
        let mut results = Vec::new();
        walk(&s, Charge(vec![0, 0]), target.0.clone(), 1, &mut results);
        assert!(!results.is_empty());
        assert!(results.iter().all(|&r| r == results[0]));
        assert_eq!(results[0], s.sigma(&target));
    }

    #[test]
    fn semiflat_values() {
        let s = one_ray_spectrum();
        // Z = i, theta = 0, R = 1, zeta = -1: exponent cancels, X = -1
        let ge = Charge::unit(2, 0);
        let v = s.x_semiflat(&ge, c(-1.0, 0.0), 1.0);
        assert!((v - c(-1.0, 0.0)).norm() < 1e-14, "{v}");
        // decay toward zeta -> 0 along R_+ when Re Z < 0
        let mut s2 = one_ray_spectrum();
        s2.generators[0].z = c(-1.0, 0.2);
        let g = Charge::unit(2, 0);
        let v1 = s2.x_semiflat(&g, c(0.1, 0.0), 1.0).norm();
        let v2 = s2.x_semiflat(&g, c(0.01, 0.0), 1.0).norm();
        assert!(v2 < v1 && v2 < 1e-10);
    }

    #[test]
    fn semiflat_reality() {
        let s = one_ray_spectrum();
        for (gamma, zeta) in [
            (Charge(vec![1, 0]), c(0.3, 0.2)),
            (Charge(vec![0, 1]), c(-0.5, 0.8)),
            (Charge(vec![2, -1]), c(0.1, -0.7)),
        ] {
            let lhs = s.x_semiflat(&gamma, zeta, 1.3);
            let anti = -1.0 / zeta.conj();
            let rhs = s.x_semiflat(&gamma.neg(), anti, 1.3).conj();
            assert!((lhs - rhs).norm() < 1e-12 * lhs.norm(), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn trivial_spectrum_converges_immediately() {
        let s = trivial_spectrum();
        let sol = tba_solve(&s, 1.0, &TbaOpts::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.rays.is_empty());
        let g = Charge(vec![1, 1]);
        let zeta = c(0.4, 0.3);
        let x = sol.evaluate_x(&g, zeta, None).unwrap();
        assert_eq!(x, s.x_semiflat(&g, zeta, 1.0));
    }

    #[test]
    fn one_ray_electric_coordinate_never_changes() {
        let s = one_ray_spectrum();
        let sol = tba_solve(&s, 1.0, &TbaOpts::default()).unwrap();
        assert!(sol.iterations <= 2, "iterations {}", sol.iterations);
        assert!(sol.sup_changes[0] < 1e-12, "{:?}", sol.sup_changes);
        let ge = Charge::unit(2, 0);
        let le = sol.log_correction(&ge, c(-1.0, 0.0), None).unwrap();
        assert!(le.norm() < 1e-14, "electric correction {le}");
    }

    #[test]
    fn one_ray_magnetic_correction_is_real_at_minus_one() {
        // at zeta = -1 the two conjugate rays combine to a real correction
        let s = one_ray_spectrum();
        let sol = tba_solve(&s, 1.0, &TbaOpts::default()).unwrap();
        let gm = Charge::unit(2, 1);
        let corr = sol.log_correction(&gm, c(-1.0, 0.0), None).unwrap();
        assert!(corr.norm() > 1e-5, "correction unexpectedly small: {corr}");
        assert!(
            corr.im.abs() < 1e-12 * corr.norm().max(1.0),
            "correction not real: {corr}"
        );
    }

    #[test]
    fn multiplicativity_of_stripped_logs() {
        let s = one_ray_spectrum();
        let sol = tba_solve(&s, 1.2, &TbaOpts::default()).unwrap();
        let a = Charge(vec![1, 0]);
        let b = Charge(vec![0, 1]);
        let ab = a.add(&b);
        let zeta = c(0.7, 0.4);
        let la = sol.log_x(&a, zeta, None).unwrap();
        let lb = sol.log_x(&b, zeta, None).unwrap();
        let lab = sol.log_x(&ab, zeta, None).unwrap();
        assert!((la + lb - lab).norm() < 1e-10, "log additivity violated");
        // signed product carries (-1)^{<a,b>} through the refinement
        let xa = sol.evaluate_x(&a, zeta, None).unwrap();
        let xb = sol.evaluate_x(&b, zeta, None).unwrap();
        let xab = sol.evaluate_x(&ab, zeta, None).unwrap();
        let twist = (s.sigma(&a) * s.sigma(&b) * s.sigma(&ab)) as f64;
        assert!((xa * xb * twist - xab).norm() < 1e-10 * xab.norm().max(1.0));
    }

    #[test]
    fn jump_factor_arithmetic() {
        let factor = |x: f64, sigma: f64, omega: i32, pairing: i32| -> f64 {
            (1.0 - sigma * x).powi(omega * pairing)
        };
        assert!((factor(0.1, 1.0, 1, 1) - 0.9).abs() < 1e-15);
        assert!((factor(0.1, 1.0, 1, 0) - 1.0).abs() < 1e-15);
        assert!((factor(0.1, 1.0, -2, 1) - 1.2345679012345678).abs() < 1e-10);
    }

    #[test]
    fn reality_of_corrected_coordinates() {
        let s = one_ray_spectrum();
        let sol = tba_solve(&s, 1.0, &TbaOpts::default()).unwrap();
        let g = Charge(vec![0, 1]);
        for &zeta in &[c(0.9, 0.3), c(-0.4, 0.6), c(0.2, -1.1)] {
            let lhs = sol.evaluate_x(&g, zeta, None).unwrap();
            let anti = -1.0 / zeta.conj();
            let rhs = sol.evaluate_x(&g.neg(), anti, None).unwrap().conj();
            let rel = (lhs - rhs).norm() / lhs.norm();
            assert!(rel < 1e-8, "reality violated at {zeta}: {rel}");
        }
    }

    #[test]
    fn correction_bound_dominates_measurement() {
        let s = one_ray_spectrum();
        for &r in &[1.0, 2.0] {
            let sol = tba_solve(&s, r, &TbaOpts::default()).unwrap();
            let gm = Charge::unit(2, 1);
            let zeta = c(-1.0, 0.0);
            let measured = sol.log_correction(&gm, zeta, None).unwrap().norm();
            let bound = sol.correction_bound(&gm, zeta);
            assert!(
                measured <= bound * (1.0 + 1e-9),
                "R = {r}: measured {measured} > bound {bound}"
            );
        }
        let sol = tba_solve(&trivial_spectrum(), 1.0, &TbaOpts::default()).unwrap();
        let gm = Charge::unit(2, 1);
        assert_eq!(sol.correction_bound(&gm, c(-1.0, 0.0)), 0.0);
        assert_eq!(
            sol.log_correction(&gm, c(-1.0, 0.0), None).unwrap().norm(),
            0.0
        );
    }

    #[test]
    fn side_hint_needed_on_ray() {
        let s = one_ray_spectrum();
        let sol = tba_solve(&s, 1.0, &TbaOpts::default()).unwrap();
        let gm = Charge::unit(2, 1);
        // l_{g_e} = Z_e R_-: Z_e = i, so the ray points along -i
        let zeta_on_ray = c(0.0, -1.0);
        assert!(matches!(
            sol.log_correction(&gm, zeta_on_ray, None),
            Err(LatticeError::NeedSideHint { .. })
        ));
        let plus = sol
            .log_correction(&gm, zeta_on_ray, Some(Side::CounterClockwise))
            .unwrap();
        let minus = sol
            .log_correction(&gm, zeta_on_ray, Some(Side::Clockwise))
            .unwrap();
        assert!((plus - minus).norm() > 1e-8, "one-sided limits coincide");
    }

    #[test]
    fn plemelj_jump_matches_jump_factor() {
        let s = one_ray_spectrum();
        let sol = tba_solve(&s, 1.0, &TbaOpts::default()).unwrap();
        let gm = Charge::unit(2, 1);
        let ge = Charge::unit(2, 0);
        for &mag in &[0.7, 1.0, 1.4] {
            let zeta0 = c(0.0, -mag);
            let x_plus = sol
                .evaluate_x(&gm, zeta0, Some(Side::CounterClockwise))
                .unwrap();
            let x_minus = sol.evaluate_x(&gm, zeta0, Some(Side::Clockwise)).unwrap();
            let s_l = sol.jump_factor(&ge, &gm, zeta0).unwrap();
            let residual = (x_plus * s_l - x_minus).norm() / x_minus.norm();
            assert!(residual < 1e-6, "|zeta| = {mag}: jump residual {residual}");
        }
    }

    #[test]
    fn wall_configuration_detected() {
        // two non-proportional charges with positively proportional Z
        let mut s = one_ray_spectrum();
        s.generators[1].z = c(0.0, 2.0);
        s.generators[1].omega = 1;
        assert!(matches!(
            tba_solve(&s, 1.0, &TbaOpts::default()),
            Err(LatticeError::WallConfiguration(..))
        ));
    }

    #[test]
    fn tower_expansion_reports_tail() {
        let mut s = one_ray_spectrum();
        let towers = vec![TowerSpec {
            base: Charge(vec![0, 1]),
            step: Charge(vec![1, 0]),
            omega: 1,
            m_max: 3,
        }];
        let tail = expand_towers(&mut s, &towers, 2.0).unwrap();
        assert_eq!(s.extra_support.len(), 3);
        assert!((tail - (-6.0f64).exp()).abs() < 1e-15);
    }
}
