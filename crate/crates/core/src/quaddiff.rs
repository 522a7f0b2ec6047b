//! Rational quadratic differentials with simple zeros and double poles:
//! trajectory tracing with sheet tracking, separatrices, classification,
//! period integrals and saddle-connection scanning.
//!
//! A trajectory of angle `theta` solves `dz/dt = dir * e^{i theta} / q^{1/2}(z)`
//! in the standard parametrization (`|q^{1/2}(z) z'| = 1`); the square-root
//! branch is continued stepwise, with the step length capped so that the
//! branch choice stays unambiguous.

use crate::numerics::GaussLegendre;
use crate::C;
use num_complex::Complex64;

#[derive(Debug, thiserror::Error)]
pub enum QuadDiffError {
    #[error("invalid differential: {0}")]
    Invalid(String),
    #[error("path passes within {dist:.3e} of branch point (zero #{index}); required clearance {required:.3e}")]
    BranchPointTooClose {
        index: usize,
        dist: f64,
        required: f64,
    },
    #[error("branch seed {seed} does not square to q at the path start (q = {q})")]
    BadBranchSeed { seed: C, q: C },
    #[error("integrator step underflow at t = {t:.6} near z = {z}; partial trajectory has {samples} samples")]
    StepUnderflow { t: f64, z: C, samples: usize },
    #[error("zero index {0} out of range")]
    ZeroIndex(usize),
}

/// Rational meromorphic quadratic differential
/// `q(z) = c * prod (z - w_j) / prod (z - p_k)^2`.
#[derive(Clone, Debug)]
pub struct QuadraticDifferential {
    pub zeros: Vec<C>,
    pub poles: Vec<C>,
    pub normalization: C,
}

impl QuadraticDifferential {
    pub fn new(zeros: Vec<C>, poles: Vec<C>, normalization: C) -> Result<Self, QuadDiffError> {
        if normalization == Complex64::new(0.0, 0.0) {
            return Err(QuadDiffError::Invalid("normalization must be nonzero".into()));
        }
        let q = QuadraticDifferential {
            zeros,
            poles,
            normalization,
        };
        let mut pts: Vec<C> = q.zeros.clone();
        pts.extend_from_slice(&q.poles);
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                if (pts[i] - pts[j]).norm() < 1e-12 {
                    return Err(QuadDiffError::Invalid(
                        "zeros and poles must be pairwise distinct".into(),
                    ));
                }
            }
        }
        Ok(q)
    }

    pub fn eval(&self, z: C) -> C {
        let mut v = self.normalization;
        for &w in &self.zeros {
            v *= z - w;
        }
        for &p in &self.poles {
            let d = z - p;
            v /= d * d;
        }
        v
    }

    /// `q'(w_j)` at the j-th (simple) zero, in closed form.
    pub fn derivative_at_zero(&self, j: usize) -> Result<C, QuadDiffError> {
        let w = *self.zeros.get(j).ok_or(QuadDiffError::ZeroIndex(j))?;
        let mut v = self.normalization;
        for (l, &u) in self.zeros.iter().enumerate() {
            if l != j {
                v *= w - u;
            }
        }
        for &p in &self.poles {
            let d = w - p;
            v /= d * d;
        }
        Ok(v)
    }

    /// Coefficient of `(z - p_k)^{-2}` at the k-th pole; the local form is
    /// `-sigma_p^2 / (z - p)^2`, so `sigma_p = sqrt(-coefficient)`.
    pub fn pole_coefficient(&self, k: usize) -> C {
        let p = self.poles[k];
        let mut v = self.normalization;
        for &w in &self.zeros {
            v *= p - w;
        }
        for (l, &u) in self.poles.iter().enumerate() {
            if l != k {
                let d = p - u;
                v /= d * d;
            }
        }
        v
    }

    pub fn critical_points(&self) -> Vec<C> {
        let mut pts = self.zeros.clone();
        pts.extend_from_slice(&self.poles);
        pts
    }

    /// Smallest pairwise distance between critical points, or `fallback`
    /// when there are fewer than two.
    pub fn critical_scale(&self, fallback: f64) -> f64 {
        let pts = self.critical_points();
        let mut best = f64::INFINITY;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                best = best.min((pts[i] - pts[j]).norm());
            }
        }
        if best.is_finite() {
            best
        } else {
            fallback
        }
    }

    fn dist_to_critical(&self, z: C) -> f64 {
        self.critical_points()
            .iter()
            .map(|&p| (z - p).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Square root of `q` at `z` with the sign matched to `reference`.
    pub fn sqrt_near(&self, z: C, reference: C) -> C {
        let s = self.eval(z).sqrt();
        if (s - reference).norm() <= (s + reference).norm() {
            s
        } else {
            -s
        }
    }
}

/// Continuous branch of `q^{1/2}` along an explicit list of points.
///
/// The branch is continued point to point; an error is raised when the path
/// comes too close to a zero for the continuation to stay unambiguous.
pub fn sqrt_tracked(
    q: &QuadraticDifferential,
    path: &[C],
    branch0: C,
) -> Result<Vec<C>, QuadDiffError> {
    if path.is_empty() {
        return Ok(vec![]);
    }
    let q0 = q.eval(path[0]);
    if (branch0 * branch0 - q0).norm() > 1e-6 * q0.norm().max(1e-12) {
        return Err(QuadDiffError::BadBranchSeed {
            seed: branch0,
            q: q0,
        });
    }
    let mut out = Vec::with_capacity(path.len());
    let mut cur = branch0;
    out.push(cur);
    for w in path.windows(2) {
        cur = continue_branch(q, w[0], w[1], cur)?;
        out.push(cur);
    }
    Ok(out)
}

/// Continue the branch value from `za` (value `sa`) to `zb`, bisecting the
/// hop until each sub-step changes `q^{1/2}` by less than 50 percent.
fn continue_branch(
    q: &QuadraticDifferential,
    za: C,
    zb: C,
    sa: C,
) -> Result<C, QuadDiffError> {
    let mut from = za;
    let mut refv = sa;
    let mut target = zb;
    let mut pending: Vec<C> = vec![];
    let mut guard = 0usize;
    loop {
        guard += 1;
        if guard > 200_000 {
            let (index, dist) = nearest_zero(q, target);
            return Err(QuadDiffError::BranchPointTooClose {
                index,
                dist,
                required: 1e-9,
            });
        }
        let sb = q.sqrt_near(target, refv);
        if (sb - refv).norm() < 0.5 * refv.norm().max(sb.norm()) {
            refv = sb;
            from = target;
            match pending.pop() {
                Some(next) => target = next,
                None => return Ok(refv),
            }
        } else {
            if (target - from).norm() < 1e-13 * (1.0 + target.norm()) {
                let (index, dist) = nearest_zero(q, target);
                return Err(QuadDiffError::BranchPointTooClose {
                    index,
                    dist,
                    required: 1e-12,
                });
            }
            pending.push(target);
            target = (from + target) * 0.5;
        }
    }
}

fn nearest_zero(q: &QuadraticDifferential, z: C) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (j, &w) in q.zeros.iter().enumerate() {
        let d = (z - w).norm();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// How a traced trajectory terminated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Terminal {
    Pole(usize),
    Zero(usize),
    Closed,
    Open,
}

/// One trajectory in the standard parametrization. Samples carry the
/// parameter, the position and the tracked branch of `q^{1/2}`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub theta: f64,
    pub direction: i8,
    pub samples: Vec<(f64, C)>,
    pub sqrt_samples: Vec<C>,
    pub start_end: Terminal,
    pub far_end: Terminal,
}

impl Trajectory {
    pub fn points(&self) -> impl Iterator<Item = C> + '_ {
        self.samples.iter().map(|&(_, z)| z)
    }

    pub fn first(&self) -> (f64, C) {
        self.samples[0]
    }

    pub fn last(&self) -> (f64, C) {
        *self.samples.last().unwrap()
    }

    /// Position and branch reference at parameter `t` (quintic Lagrange).
    pub fn at(&self, t: f64) -> (C, C) {
        let n = self.samples.len();
        if t <= self.samples[0].0 {
            return (self.samples[0].1, self.sqrt_samples[0]);
        }
        if t >= self.samples[n - 1].0 {
            return (self.samples[n - 1].1, self.sqrt_samples[n - 1]);
        }
        let j = match self
            .samples
            .binary_search_by(|&(g, _)| g.partial_cmp(&t).unwrap())
        {
            Ok(j) => return (self.samples[j].1, self.sqrt_samples[j]),
            Err(j) => j - 1,
        };
        let width = 6.min(n);
        let lo = j.saturating_sub(2).min(n - width);
        let mut z = Complex64::new(0.0, 0.0);
        for pos in 0..width {
            let i = lo + pos;
            let mut l = 1.0;
            for qq in 0..width {
                let k = lo + qq;
                if qq != pos {
                    l *= (t - self.samples[k].0) / (self.samples[i].0 - self.samples[k].0);
                }
            }
            z += self.samples[i].1 * l;
        }
        let refv = if (t - self.samples[j].0).abs() < (self.samples[j + 1].0 - t).abs() {
            self.sqrt_samples[j]
        } else {
            self.sqrt_samples[j + 1]
        };
        (z, refv)
    }

    /// Reverse the parametrization (t -> -t with the origin shifted so the
    /// parameter still increases along the samples).
    pub fn reversed(&self) -> Trajectory {
        let mut samples: Vec<(f64, C)> =
            self.samples.iter().rev().map(|&(t, z)| (-t, z)).collect();
        let t0 = samples[0].0;
        for s in &mut samples {
            s.0 -= t0;
        }
        Trajectory {
            theta: self.theta,
            direction: -self.direction,
            samples,
            sqrt_samples: self.sqrt_samples.iter().rev().cloned().collect(),
            start_end: self.far_end,
            far_end: self.start_end,
        }
    }
}

/// Stopping rules for the tracer.
#[derive(Clone, Copy, Debug)]
pub struct StopRules {
    pub max_arclength: f64,
    pub pole_capture: f64,
    pub zero_capture: f64,
    pub closure_radius: f64,
    pub rel_tol: f64,
    pub max_step: f64,
    /// Spatial step cap as a fraction of the distance to the nearest
    /// critical point; also bounds the branch-tracking hop.
    pub dist_step_factor: f64,
}

impl StopRules {
    /// Capture radii scaled to the differential's critical distance,
    /// following the `1e-3 * min pairwise distance` convention.
    pub fn for_differential(q: &QuadraticDifferential) -> Self {
        let scale = q.critical_scale(1.0);
        StopRules {
            max_arclength: 200.0,
            pole_capture: 1e-3 * scale,
            zero_capture: 1e-3 * scale,
            closure_radius: 1e-3 * scale,
            rel_tol: 1e-10,
            max_step: f64::INFINITY,
            dist_step_factor: 0.3,
        }
    }

    pub fn with_capture(mut self, r: f64) -> Self {
        self.pole_capture = r;
        self.zero_capture = r;
        self
    }

    pub fn with_budget(mut self, t: f64) -> Self {
        self.max_arclength = t;
        self
    }

    pub fn with_max_step(mut self, h: f64) -> Self {
        self.max_step = h;
        self
    }

    pub fn with_dist_step_factor(mut self, f: f64) -> Self {
        self.dist_step_factor = f;
        self
    }
}

/// Trace a trajectory of angle `theta` from `z0`.
///
/// `branch0` fixes the square-root branch at `z0` (`None` takes the
/// principal branch); the velocity is `dir * e^{i theta} / q^{1/2}(z)`.
/// Integration is RK4 with step doubling; the step is capped by the
/// distance to the nearest critical point, which keeps the branch tracking
/// unambiguous and removes stiffness at the turning points.
pub fn trace_trajectory(
    q: &QuadraticDifferential,
    z0: C,
    theta: f64,
    direction: i8,
    branch0: Option<C>,
    stop: &StopRules,
) -> Result<Trajectory, QuadDiffError> {
    let q0 = q.eval(z0);
    let sqrt0 = match branch0 {
        Some(b) => {
            if (b * b - q0).norm() > 1e-6 * q0.norm().max(1e-12) {
                return Err(QuadDiffError::BadBranchSeed { seed: b, q: q0 });
            }
            q.sqrt_near(z0, b)
        }
        None => q0.sqrt(),
    };
    let dir = Complex64::new(0.0, theta).exp() * direction as f64;

    let mut t = 0.0f64;
    let mut z = z0;
    let mut s = sqrt0;
    let mut samples = vec![(t, z)];
    let mut sqrts = vec![s];
    let start_tangent = dir / s;

    let mut h = initial_step(q, z);
    let scale = q.critical_scale(1.0).max(z0.norm()).max(1.0);
    let mut far_end = Terminal::Open;

    'outer: while t < stop.max_arclength {
        if stop.max_arclength - t < 1e-12 * stop.max_arclength.max(1.0) {
            break 'outer;
        }
        if h < 1e-13 * scale {
            return Err(QuadDiffError::StepUnderflow {
                t,
                z,
                samples: samples.len(),
            });
        }
        let rhs = |zz: C, refv: C| -> C { dir / q.sqrt_near(zz, refv) };
        let step = |z: C, s: C, h: f64| -> (C, C) {
            let k1 = rhs(z, s);
            let k2 = rhs(z + k1 * (0.5 * h), s);
            let k3 = rhs(z + k2 * (0.5 * h), s);
            let k4 = rhs(z + k3 * h, s);
            let zn = z + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            let sn = q.sqrt_near(zn, s);
            (zn, sn)
        };

        let (z_full, _) = step(z, s, h);
        let (z_h1, s_h1) = step(z, s, 0.5 * h);
        let (z_half, s_half) = step(z_h1, s_h1, 0.5 * h);
        let err = (z_full - z_half).norm() / 15.0;
        let tol = stop.rel_tol * (1.0 + z.norm());

        if err > tol {
            h *= 0.5;
            continue;
        }

        // accept, with a Richardson refinement of the position
        let z_new = z_half + (z_half - z_full) / 15.0;
        let s_new = q.sqrt_near(z_new, s_half);
        t += h;
        z = z_new;
        s = s_new;
        samples.push((t, z));
        sqrts.push(s);

        for (k, &p) in q.poles.iter().enumerate() {
            if (z - p).norm() < stop.pole_capture {
                far_end = Terminal::Pole(k);
                break 'outer;
            }
        }
        for (k, &w) in q.zeros.iter().enumerate() {
            if (z - w).norm() < stop.zero_capture {
                far_end = Terminal::Zero(k);
                break 'outer;
            }
        }
        if t > 20.0 * stop.closure_radius.max(0.05) && (z - z0).norm() < stop.closure_radius {
            let tangent = dir / s;
            let align = (tangent.re * start_tangent.re + tangent.im * start_tangent.im)
                / (tangent.norm() * start_tangent.norm());
            if align > 0.999 {
                far_end = Terminal::Closed;
                break 'outer;
            }
        }

        // grow slowly; cap the spatial step at a fraction of the distance
        // to the nearest critical point (|dz| = h / |q^{1/2}|)
        let d = q.dist_to_critical(z);
        let cap = if d.is_finite() {
            (stop.dist_step_factor * d * s.norm()).max(1e-13 * scale)
        } else {
            f64::INFINITY
        };
        h = (h * 1.6).min(cap).min(stop.max_step);
        if t + h > stop.max_arclength {
            h = stop.max_arclength - t;
        }
    }

    Ok(Trajectory {
        theta,
        direction,
        samples,
        sqrt_samples: sqrts,
        start_end: Terminal::Open,
        far_end,
    })
}

fn initial_step(q: &QuadraticDifferential, z: C) -> f64 {
    let d = q.dist_to_critical(z);
    let s = q.eval(z).sqrt().norm();
    let cap = if d.is_finite() { 0.2 * d * s } else { 0.1 };
    cap.min(0.05).max(1e-10)
}

/// Trace in both directions from a regular point and splice into a single
/// curve with increasing parameter; the backward branch supplies the start
/// classification.
pub fn trace_full(
    q: &QuadraticDifferential,
    z0: C,
    theta: f64,
    branch0: Option<C>,
    stop: &StopRules,
) -> Result<Trajectory, QuadDiffError> {
    let fwd = trace_trajectory(q, z0, theta, 1, branch0, stop)?;
    let bwd = trace_trajectory(q, z0, theta, -1, branch0, stop)?;
    let mut samples: Vec<(f64, C)> = bwd.samples.iter().rev().map(|&(t, z)| (-t, z)).collect();
    let mut sqrts: Vec<C> = bwd.sqrt_samples.iter().rev().cloned().collect();
    samples.extend(fwd.samples.iter().skip(1).cloned());
    sqrts.extend(fwd.sqrt_samples.iter().skip(1).cloned());
    Ok(Trajectory {
        theta,
        direction: 1,
        samples,
        sqrt_samples: sqrts,
        start_end: bwd.far_end,
        far_end: fwd.far_end,
    })
}

/// Trajectory type in the pole/zero landscape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryClass {
    Generic,
    Separating,
    Saddle,
    Periodic,
    Divergent,
}

/// Classification from the two terminal events; budget exhaustion maps to
/// divergent.
pub fn classify(traj: &Trajectory) -> TrajectoryClass {
    use Terminal::*;
    match (traj.start_end, traj.far_end) {
        (Closed, _) | (_, Closed) => TrajectoryClass::Periodic,
        (Pole(_), Pole(_)) => TrajectoryClass::Generic,
        (Zero(_), Pole(_)) | (Pole(_), Zero(_)) => TrajectoryClass::Separating,
        (Zero(_), Zero(_)) => TrajectoryClass::Saddle,
        _ => TrajectoryClass::Divergent,
    }
}

/// The three critical trajectories leaving a simple zero.
#[derive(Debug)]
pub struct Separatrices {
    pub trajectories: Vec<Trajectory>,
    pub departure_angles: [f64; 3],
    pub collision_warning: bool,
}

/// Departure directions at a simple zero: `q(z) ~ c (z - w)` forces
/// `arg(c) + 3 phi = 2 theta (mod 2 pi)`, so the three directions are
/// `phi_j = (2 theta - arg c + 2 pi j) / 3`.
pub fn separatrix_angles(
    q: &QuadraticDifferential,
    zero_index: usize,
    theta: f64,
) -> Result<[f64; 3], QuadDiffError> {
    let c = q.derivative_at_zero(zero_index)?;
    let base = (2.0 * theta - c.arg()) / 3.0;
    Ok([
        base,
        base + 2.0 * std::f64::consts::PI / 3.0,
        base + 4.0 * std::f64::consts::PI / 3.0,
    ])
}

pub fn separatrices(
    q: &QuadraticDifferential,
    zero_index: usize,
    theta: f64,
    stop: &StopRules,
) -> Result<Separatrices, QuadDiffError> {
    let w = *q
        .zeros
        .get(zero_index)
        .ok_or(QuadDiffError::ZeroIndex(zero_index))?;
    let angles = separatrix_angles(q, zero_index, theta)?;
    let scale = q.critical_scale(1.0);
    let r_seed = (0.05 * scale).max(4.0 * stop.zero_capture);
    let mut trajectories = Vec::with_capacity(3);
    for &phi in &angles {
        let seed = w + Complex64::from_polar(r_seed, phi);
        let sq = q.eval(seed).sqrt();
        // choose the direction that moves away from the zero
        let v_plus = Complex64::new(0.0, theta).exp() / sq;
        let outward = Complex64::from_polar(1.0, phi);
        let dir = if v_plus.re * outward.re + v_plus.im * outward.im >= 0.0 {
            1
        } else {
            -1
        };
        let traj = trace_trajectory(q, seed, theta, dir, Some(sq), stop)?;
        trajectories.push(traj);
    }
    let mut collision_warning = false;
    for i in 0..3 {
        for j in i + 1..3 {
            let (zi, zj) = (trajectories[i].last().1, trajectories[j].last().1);
            if (zi - zj).norm() < 2.0 * stop.zero_capture
                && trajectories[i].far_end == trajectories[j].far_end
            {
                collision_warning = true;
            }
        }
    }
    Ok(Separatrices {
        trajectories,
        departure_angles: angles,
        collision_warning,
    })
}

/// Densified path with a continuously tracked square-root branch, used for
/// all period-type integrals.
#[derive(Clone, Debug)]
pub struct SheetPath {
    pub points: Vec<C>,
    pub sqrts: Vec<C>,
}

impl SheetPath {
    /// Build along a polyline, densifying where `|q^{1/2}|` varies quickly
    /// so the hop criterion of the branch continuation can hold.
    pub fn along(
        q: &QuadraticDifferential,
        polyline: &[C],
        branch0: C,
    ) -> Result<Self, QuadDiffError> {
        let mut pts: Vec<C> = Vec::new();
        for w in polyline.windows(2) {
            let mut local = vec![w[0], w[1]];
            let mut k = 0;
            while k + 1 < local.len() {
                let (a, b) = (local[k], local[k + 1]);
                let need_split = {
                    let sa = q.eval(a).sqrt().norm();
                    let sb = q.eval(b).sqrt().norm();
                    let ratio = if sa > sb { sa / sb } else { sb / sa };
                    ratio > 1.2 && (b - a).norm() > 1e-10
                };
                if need_split {
                    local.insert(k + 1, (a + b) * 0.5);
                } else {
                    k += 1;
                }
            }
            if pts.is_empty() {
                pts.extend_from_slice(&local);
            } else {
                pts.extend_from_slice(&local[1..]);
            }
        }
        let sqrts = sqrt_tracked(q, &pts, branch0)?;
        Ok(SheetPath { points: pts, sqrts })
    }

    /// Does the path end on the sheet it started on?
    pub fn closes_on_sheet(&self) -> bool {
        let first = self.sqrts[0];
        let last = *self.sqrts.last().unwrap();
        (first - last).norm() < 0.5 * first.norm()
    }

    /// `int f(z, q^{1/2}(z)) dz` along the path, by per-segment Gauss
    /// quadrature with interval halving until two levels agree.
    pub fn integrate<F: Fn(C, C) -> C>(&self, q: &QuadraticDifferential, f: F, tol: f64) -> C {
        let gl = GaussLegendre::<f64>::new(8);
        let mut total = Complex64::new(0.0, 0.0);
        for k in 0..self.points.len() - 1 {
            let (za, zb) = (self.points[k], self.points[k + 1]);
            let (sa, sb) = (self.sqrts[k], self.sqrts[k + 1]);
            total += segment_integral(q, &gl, za, zb, sa, sb, &f, tol, 0);
        }
        total
    }

    /// `int p(z, q^{1/2}) dz + r(z, q^{1/2}) d z-bar` along the path.
    pub fn integrate_pair<P, Q>(
        &self,
        q: &QuadraticDifferential,
        p_dz: P,
        r_dzbar: Q,
        tol: f64,
    ) -> C
    where
        P: Fn(C, C) -> C,
        Q: Fn(C, C) -> C,
    {
        let gl = GaussLegendre::<f64>::new(8);
        let mut total = Complex64::new(0.0, 0.0);
        for k in 0..self.points.len() - 1 {
            let (za, zb) = (self.points[k], self.points[k + 1]);
            let (sa, sb) = (self.sqrts[k], self.sqrts[k + 1]);
            let dz = zb - za;
            // dz-bar pullback along a straight segment is conj(dz) du
            let f = |z: C, s: C| p_dz(z, s) + r_dzbar(z, s) * (dz.conj() / dz);
            total += segment_integral(q, &gl, za, zb, sa, sb, &f, tol, 0);
        }
        total
    }

    /// Winding number of the (closed) path around a point.
    pub fn winding_number(&self, around: C) -> i32 {
        let mut total = 0.0f64;
        for k in 0..self.points.len() - 1 {
            let a = self.points[k] - around;
            let b = self.points[k + 1] - around;
            total += (b / a).arg();
        }
        (total / (2.0 * std::f64::consts::PI)).round() as i32
    }
}

#[allow(clippy::too_many_arguments)]
fn segment_integral<F: Fn(C, C) -> C>(
    q: &QuadraticDifferential,
    gl: &GaussLegendre<f64>,
    za: C,
    zb: C,
    sa: C,
    sb: C,
    f: &F,
    tol: f64,
    depth: usize,
) -> C {
    let dz = zb - za;
    let one_level = |za: C, dz: C, sa: C, sb: C| -> C {
        let mut acc = Complex64::new(0.0, 0.0);
        for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
            let u = 0.5 * (x + 1.0);
            let z = za + dz * u;
            // branch prediction by linear interpolation of the endpoints
            let pred = sa * (1.0 - u) + sb * u;
            let s = q.sqrt_near(z, pred);
            acc += f(z, s) * w;
        }
        acc * dz * 0.5
    };
    let coarse = one_level(za, dz, sa, sb);
    let zm = za + dz * 0.5;
    let sm = q.sqrt_near(zm, (sa + sb) * 0.5);
    let fine = one_level(za, dz * 0.5, sa, sm) + one_level(zm, dz * 0.5, sm, sb);
    if (coarse - fine).norm() <= tol.max(1e-15 * fine.norm()) || depth >= 24 {
        fine
    } else {
        segment_integral(q, gl, za, zm, sa, sm, f, tol * 0.5, depth + 1)
            + segment_integral(q, gl, zm, zb, sm, sb, f, tol * 0.5, depth + 1)
    }
}

/// Circle as a polyline, counter-clockwise for `orientation = 1`.
pub fn circle_polyline(center: C, radius: f64, orientation: i8, n: usize) -> Vec<C> {
    let s = orientation as f64;
    (0..=n)
        .map(|k| {
            let th = s * 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            center + Complex64::from_polar(radius, th)
        })
        .collect()
}

/// Period `Z = (1/pi) oint q^{1/2}` over a cycle given as a closed
/// polyline, with the branch seeded at the first point.
pub fn period(
    q: &QuadraticDifferential,
    cycle: &[C],
    branch_seed: C,
    tol: f64,
) -> Result<C, QuadDiffError> {
    let sheet = SheetPath::along(q, cycle, branch_seed)?;
    let val = sheet.integrate(q, |_z, s| s, tol);
    Ok(val / std::f64::consts::PI)
}

/// A saddle connection found by the angle scan.
#[derive(Clone, Debug)]
pub struct SaddleEvent {
    pub theta_c: f64,
    pub zeros: (usize, usize),
    pub period: C,
    pub confident: bool,
}

/// Signed closest approach of the separatrix with departure index `branch`
/// from `zero_a` to `zero_b`: the magnitude is the minimal distance, the
/// sign records the side on which the target is passed.
fn signed_miss(
    q: &QuadraticDifferential,
    zero_a: usize,
    branch: usize,
    zero_b: usize,
    theta: f64,
    stop: &StopRules,
) -> Option<(f64, bool)> {
    let seps = separatrices(q, zero_a, theta, stop).ok()?;
    let traj = &seps.trajectories[branch];
    let target = q.zeros[zero_b];
    let mut best = f64::INFINITY;
    let mut arg = 0usize;
    for (k, &(_, z)) in traj.samples.iter().enumerate() {
        let d = (z - target).norm();
        if d < best {
            best = d;
            arg = k;
        }
    }
    if traj.far_end == Terminal::Zero(zero_b) {
        return Some((0.0, true));
    }
    let k = arg.min(traj.samples.len().saturating_sub(2));
    let v = traj.samples[k + 1].1 - traj.samples[k].1;
    let w = target - traj.samples[k].1;
    let cross = v.re * w.im - v.im * w.re;
    Some((best.copysign(if cross >= 0.0 { 1.0 } else { -1.0 }), false))
}

/// Scan a theta grid for saddle connections: shoot all separatrices from
/// all zeros, bracket sign changes of the signed miss distance, refine by
/// bisection and attach the period over a thin cycle around the connecting
/// segment.
pub fn find_saddles(
    q: &QuadraticDifferential,
    theta_grid: &[f64],
    tol: f64,
    stop: &StopRules,
) -> Result<Vec<SaddleEvent>, QuadDiffError> {
    let nz = q.zeros.len();
    let mut events: Vec<SaddleEvent> = Vec::new();
    if nz < 2 || theta_grid.len() < 2 {
        return Ok(events);
    }
    let near = 0.35 * q.critical_scale(1.0);
    // brackets only pair adjacent angles; a hole in the grid breaks the scan
    let mut min_gap = f64::INFINITY;
    for w in theta_grid.windows(2) {
        let d = w[1] - w[0];
        if d > 0.0 {
            min_gap = min_gap.min(d);
        }
    }
    let max_bracket = 3.0 * min_gap;

    for a in 0..nz {
        for b in 0..nz {
            if a == b {
                continue;
            }
            for branch in 0..3 {
                let mut prev: Option<(f64, f64)> = None; // (theta, miss)
                for &th in theta_grid {
                    let Some((m, captured)) = signed_miss(q, a, branch, b, th, stop) else {
                        prev = None;
                        continue;
                    };
                    if captured {
                        push_event(q, &mut events, a, b, th, true, tol)?;
                        prev = None;
                        continue;
                    }
                    if let Some((th0, m0)) = prev {
                        if th - th0 <= max_bracket
                            && m0.signum() != m.signum()
                            && m0.abs() < near
                            && m.abs() < near
                        {
                            let (mut lo, mut hi, mut mlo) = (th0, th, m0);
                            let mut ok = false;
                            for _ in 0..80 {
                                if hi - lo < tol * 1e-3 {
                                    ok = true;
                                    break;
                                }
                                let mid = 0.5 * (lo + hi);
                                match signed_miss(q, a, branch, b, mid, stop) {
                                    Some((mm, cap)) => {
                                        if cap || mm == 0.0 {
                                            lo = mid;
                                            hi = mid;
                                            ok = true;
                                            break;
                                        }
                                        if mm.signum() == mlo.signum() {
                                            lo = mid;
                                            mlo = mm;
                                        } else {
                                            hi = mid;
                                        }
                                    }
                                    None => break,
                                }
                            }
                            let th_c = 0.5 * (lo + hi);
                            push_event(q, &mut events, a, b, th_c, ok, tol)?;
                        }
                    }
                    prev = Some((th, m));
                }
            }
        }
    }
    events.sort_by(|x, y| x.theta_c.partial_cmp(&y.theta_c).unwrap());
    Ok(events)
}

fn push_event(
    q: &QuadraticDifferential,
    events: &mut Vec<SaddleEvent>,
    a: usize,
    b: usize,
    theta_c: f64,
    confident: bool,
    tol: f64,
) -> Result<(), QuadDiffError> {
    let pair = (a.min(b), a.max(b));
    for e in events.iter() {
        if e.zeros == pair && (e.theta_c - theta_c).abs() < tol.max(1e-6) * 10.0 {
            return Ok(());
        }
    }
    let z = saddle_period(q, q.zeros[a], q.zeros[b], theta_c)?;
    events.push(SaddleEvent {
        theta_c,
        zeros: pair,
        period: z,
        confident,
    });
    Ok(())
}

/// Period of the charge attached to a saddle between `za` and `zb`: a thin
/// stadium cycle around the segment, oriented so that `e^{-i theta_c} Z`
/// comes out on the positive real axis.
pub fn saddle_period(
    q: &QuadraticDifferential,
    za: C,
    zb: C,
    theta_c: f64,
) -> Result<C, QuadDiffError> {
    let seg = zb - za;
    let len = seg.norm();
    let u = seg / len;
    // margin clear of every other critical point
    let mut margin = 0.25 * len;
    for &p in q.critical_points().iter() {
        if (p - za).norm() < 1e-12 || (p - zb).norm() < 1e-12 {
            continue;
        }
        let d = dist_to_segment(p, za, zb);
        margin = margin.min(0.45 * d);
    }
    let n_arc = 48usize;
    let normal = u * Complex64::new(0.0, 1.0);
    let mut path = Vec::new();
    for k in 0..=n_arc {
        let s = k as f64 / n_arc as f64;
        path.push(za + u * (len * s) + normal * margin);
    }
    for k in 1..=n_arc {
        let phi = std::f64::consts::PI * k as f64 / n_arc as f64;
        path.push(zb + normal * (margin * phi.cos()) + u * (margin * phi.sin()));
    }
    for k in 1..=n_arc {
        let s = k as f64 / n_arc as f64;
        path.push(zb - u * (len * s) - normal * margin);
    }
    for k in 1..=n_arc {
        let phi = std::f64::consts::PI * k as f64 / n_arc as f64;
        path.push(za - normal * (margin * phi.cos()) - u * (margin * phi.sin()));
    }
    path.push(path[0]);
    let seed = q.eval(path[0]).sqrt();
    let z = period(q, &path, seed, 1e-12)?;
    let rot = (Complex64::new(0.0, -theta_c).exp() * z).re;
    Ok(if rot >= 0.0 { z } else { -z })
}

fn dist_to_segment(p: C, a: C, b: C) -> f64 {
    let ab = b - a;
    let t = ((p - a).re * ab.re + (p - a).im * ab.im) / ab.norm_sqr();
    let t = t.clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}
