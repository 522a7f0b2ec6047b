//! Linear Volterra equations of the second kind with the initial value at
//! infinity,
//!
//! ```text
//! x(t) = a(t) - int_t^inf K(t,s) x(s) ds ,
//! ```
//!
//! together with the finite-interval variant used for parallel transport and
//! the derived equation for parameter derivatives. Solving is by Picard
//! iteration of the defining fixed-point operator; the contraction constant
//! `lambda = sup_t int_t^inf ||K(t,s)|| ds` is estimated numerically and the
//! solve is refused when the safety-margined estimate reaches 1.

use crate::numerics::{GaussLegendre, NumericsError};
use crate::C;
use num_complex::Complex64;

#[derive(Debug, thiserror::Error)]
pub enum VolterraError {
    #[error("kernel is not a contraction: measured lambda = {lambda:.6} (with safety margin {with_margin:.6} >= 1)")]
    ContractionFailure { lambda: f64, with_margin: f64 },
    #[error("Picard iteration exceeded {max_iters} iterations; last sup-difference {last_diff:.3e}")]
    IterationLimit { max_iters: usize, last_diff: f64 },
    #[error("iteration diverging: sup-difference failed to decrease for {stalled} consecutive steps (last {last_diff:.3e})")]
    Diverging { stalled: usize, last_diff: f64 },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Complex square matrix of small dimension, row major.
#[derive(Clone, Debug)]
pub struct CMat {
    pub n: usize,
    pub a: Vec<C>,
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        CMat {
            n,
            a: vec![C::new(0.0, 0.0); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i * n + i] = C::new(1.0, 0.0);
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> C {
        self.a[i * self.n + j]
    }

    pub fn matvec(&self, v: &[C]) -> Vec<C> {
        let n = self.n;
        (0..n)
            .map(|i| (0..n).map(|j| self.a[i * n + j] * v[j]).sum())
            .collect()
    }

    /// Operator 2-norm (largest singular value). Exact for n <= 2, power
    /// iteration otherwise.
    pub fn op_norm(&self) -> f64 {
        match self.n {
            0 => 0.0,
            1 => self.a[0].norm(),
            2 => {
                let f: f64 = self.a.iter().map(|z| z.norm_sqr()).sum();
                let det = self.a[0] * self.a[3] - self.a[1] * self.a[2];
                let d = det.norm_sqr();
                let disc = (f * f - 4.0 * d).max(0.0);
                (0.5 * (f + disc.sqrt())).sqrt()
            }
            n => {
                let mut v = vec![C::new(1.0, 0.0); n];
                let mut norm = 0.0;
                for _ in 0..50 {
                    let av = self.matvec(&v);
                    let mut w = vec![C::new(0.0, 0.0); n];
                    for i in 0..n {
                        for j in 0..n {
                            w[j] += self.a[i * n + j].conj() * av[i];
                        }
                    }
                    let wn = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    if wn == 0.0 {
                        return 0.0;
                    }
                    for z in &mut w {
                        *z /= wn;
                    }
                    v = w;
                    norm = wn;
                }
                norm.sqrt()
            }
        }
    }
}

fn vec_norm(v: &[C]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Grid geometry: steps start at `initial_step` and grow geometrically
/// toward the tail, clustering nodes at the left endpoint.
#[derive(Clone, Copy, Debug)]
pub struct GridSpec {
    pub initial_step: f64,
    pub growth: f64,
    pub max_step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            initial_step: 1e-3,
            growth: 1.12,
            max_step: 0.25,
        }
    }
}

impl GridSpec {
    pub fn build(&self, t0: f64, t1: f64) -> Vec<f64> {
        assert!(t1 > t0);
        let mut grid = vec![t0];
        let mut h = self.initial_step.min(t1 - t0);
        let mut t = t0;
        loop {
            t += h;
            if t >= t1 - 1e-12 * (t1 - t0).abs() {
                grid.push(t1);
                break;
            }
            grid.push(t);
            h = (h * self.growth).min(self.max_step);
        }
        grid
    }
}

/// An initial value problem at infinity, already truncated at `t_max`.
///
/// The caller certifies that `int_{t_max}^inf ||K(t,s)|| ds < tail_bound`
/// for every `t`, so that beyond `t_max` the solution is the constant
/// boundary limit.
pub struct IvpAtInfinity<FA, FK>
where
    FA: Fn(f64) -> Vec<C>,
    FK: Fn(f64, f64) -> CMat,
{
    pub dim: usize,
    pub t_start: f64,
    pub t_max: f64,
    pub boundary: FA,
    pub boundary_limit: Vec<C>,
    pub kernel: FK,
    /// Certified bound on the truncated kernel tail integral.
    pub tail_bound: f64,
}

/// Solution sampled on the solver grid with the tail constant.
#[derive(Clone, Debug)]
pub struct GridSolution {
    pub grid: Vec<f64>,
    pub values: Vec<Vec<C>>,
    pub tail: Vec<C>,
    pub sup_error: f64,
    pub iterations: usize,
    pub sup_diffs: Vec<f64>,
}

impl GridSolution {
    /// Quintic (6-point Lagrange) interpolation; the tail constant beyond
    /// the grid, the first value before it.
    pub fn eval(&self, t: f64) -> Vec<C> {
        let n = self.grid.len();
        if t >= self.grid[n - 1] {
            return self.tail.clone();
        }
        if t <= self.grid[0] {
            return self.values[0].clone();
        }
        let j = match self.grid.binary_search_by(|g| g.partial_cmp(&t).unwrap()) {
            Ok(j) => return self.values[j].clone(),
            Err(j) => j - 1,
        };
        let width = 6.min(n);
        let lo = j.saturating_sub(2).min(n - width);
        let dim = self.values[0].len();
        let mut out = vec![C::new(0.0, 0.0); dim];
        for pos in 0..width {
            let i = lo + pos;
            let mut l = 1.0;
            for q in 0..width {
                let k = lo + q;
                if q != pos {
                    l *= (t - self.grid[k]) / (self.grid[i] - self.grid[k]);
                }
            }
            for d in 0..dim {
                out[d] += self.values[i][d] * l;
            }
        }
        out
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| vec_norm(v)).fold(0.0, f64::max)
    }
}

/// Safety factor applied to the measured contraction constant.
const LAMBDA_SAFETY: f64 = 1.05;

/// Estimate `lambda` over the grid's t values and the a-priori bound
/// `||a||_inf / (1 - lambda)`.
pub fn picard_bound<FA, FK>(problem: &IvpAtInfinity<FA, FK>, grid_spec: &GridSpec) -> (f64, f64)
where
    FA: Fn(f64) -> Vec<C>,
    FK: Fn(f64, f64) -> CMat,
{
    let grid = grid_spec.build(problem.t_start, problem.t_max);
    let gl = GaussLegendre::<f64>::new(4);
    let lambda = lambda_on_grid(&problem.kernel, problem.tail_bound, &grid, &gl);
    let a_sup = grid
        .iter()
        .map(|&t| vec_norm(&(problem.boundary)(t)))
        .fold(0.0, f64::max);
    let bound = if lambda < 1.0 {
        a_sup / (1.0 - lambda)
    } else {
        f64::INFINITY
    };
    (lambda, bound)
}

fn lambda_on_grid<FK>(kernel: &FK, tail_bound: f64, grid: &[f64], gl: &GaussLegendre<f64>) -> f64
where
    FK: Fn(f64, f64) -> CMat,
{
    let n = grid.len();
    let mut lambda = 0.0f64;
    for k in 0..n {
        let mut acc = 0.0;
        for j in k..n - 1 {
            let (a, b) = (grid[j], grid[j + 1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
                let s = mid + half * x;
                acc += w * half * kernel(grid[k], s).op_norm();
            }
        }
        acc += tail_bound;
        lambda = lambda.max(acc);
    }
    lambda
}

/// Solver tolerances.
#[derive(Clone, Copy, Debug)]
pub struct SolveOpts {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolveOpts {
    fn default() -> Self {
        SolveOpts {
            tol: 1e-12,
            max_iters: 400,
        }
    }
}

/// Unique bounded solution of the initial value problem at infinity by
/// Picard iteration from the boundary function.
pub fn solve_ivp_infinity<FA, FK>(
    problem: &IvpAtInfinity<FA, FK>,
    grid_spec: &GridSpec,
    opts: &SolveOpts,
) -> Result<GridSolution, VolterraError>
where
    FA: Fn(f64) -> Vec<C>,
    FK: Fn(f64, f64) -> CMat,
{
    let boundary_vals = prepare(problem, grid_spec)?;
    let (grid, boundary_vals, lambda, gl) = boundary_vals;
    let start = boundary_vals.clone();
    iterate(
        problem.dim,
        &grid,
        &boundary_vals,
        problem.boundary_limit.clone(),
        &problem.kernel,
        start,
        lambda,
        problem.tail_bound,
        opts,
        &gl,
    )
}

/// Same as [`solve_ivp_infinity`] but starting the iteration from a caller
/// supplied function (used by the uniqueness checks).
pub fn solve_ivp_infinity_from<FA, FK, F0>(
    problem: &IvpAtInfinity<FA, FK>,
    grid_spec: &GridSpec,
    opts: &SolveOpts,
    start: F0,
) -> Result<GridSolution, VolterraError>
where
    FA: Fn(f64) -> Vec<C>,
    FK: Fn(f64, f64) -> CMat,
    F0: Fn(f64) -> Vec<C>,
{
    let prepared = prepare(problem, grid_spec)?;
    let (grid, boundary_vals, lambda, gl) = prepared;
    let start_vals: Vec<Vec<C>> = grid.iter().map(|&t| start(t)).collect();
    iterate(
        problem.dim,
        &grid,
        &boundary_vals,
        problem.boundary_limit.clone(),
        &problem.kernel,
        start_vals,
        lambda,
        problem.tail_bound,
        opts,
        &gl,
    )
}

type Prepared = (Vec<f64>, Vec<Vec<C>>, f64, GaussLegendre<f64>);

fn prepare<FA, FK>(
    problem: &IvpAtInfinity<FA, FK>,
    grid_spec: &GridSpec,
) -> Result<Prepared, VolterraError>
where
    FA: Fn(f64) -> Vec<C>,
    FK: Fn(f64, f64) -> CMat,
{
    if problem.t_max <= problem.t_start {
        return Err(VolterraError::InvalidProblem(
            "t_max must exceed t_start".into(),
        ));
    }
    let grid = grid_spec.build(problem.t_start, problem.t_max);
    let gl = GaussLegendre::<f64>::new(4);
    let lambda = lambda_on_grid(&problem.kernel, problem.tail_bound, &grid, &gl);
    if LAMBDA_SAFETY * lambda >= 1.0 {
        return Err(VolterraError::ContractionFailure {
            lambda,
            with_margin: LAMBDA_SAFETY * lambda,
        });
    }
    let boundary_vals: Vec<Vec<C>> = grid.iter().map(|&t| (problem.boundary)(t)).collect();
    Ok((grid, boundary_vals, lambda, gl))
}

#[allow(clippy::too_many_arguments)]
fn iterate<FK>(
    dim: usize,
    grid: &[f64],
    boundary_vals: &[Vec<C>],
    boundary_limit: Vec<C>,
    kernel: &FK,
    mut x: Vec<Vec<C>>,
    lambda: f64,
    tail_bound: f64,
    opts: &SolveOpts,
    gl: &GaussLegendre<f64>,
) -> Result<GridSolution, VolterraError>
where
    FK: Fn(f64, f64) -> CMat,
{
    let n = grid.len();
    let per = gl.nodes.len();
    let mut sup_diffs = Vec::new();
    let mut stalled = 0usize;
    let mut last = f64::INFINITY;

    // Gauss nodes and weights per interval are iteration independent
    let mut node_s = Vec::with_capacity((n - 1) * per);
    let mut node_w = Vec::with_capacity((n - 1) * per);
    for j in 0..n - 1 {
        let (a, b) = (grid[j], grid[j + 1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (&xx, &w) in gl.nodes.iter().zip(&gl.weights) {
            node_s.push(mid + half * xx);
            node_w.push(w * half);
        }
    }

    for iter in 1..=opts.max_iters {
        let cur = GridSolution {
            grid: grid.to_vec(),
            values: x.clone(),
            tail: boundary_limit.clone(),
            sup_error: 0.0,
            iterations: iter,
            sup_diffs: vec![],
        };
        let node_x: Vec<Vec<C>> = node_s.iter().map(|&s| cur.eval(s)).collect();

        let mut diff = 0.0f64;
        let mut next = Vec::with_capacity(n);
        for k in 0..n {
            let mut integral = vec![C::new(0.0, 0.0); dim];
            // intervals left of grid[k] are excluded exactly: the integral
            // starts at a grid node
            for j in k * per..node_s.len() {
                let kv = kernel(grid[k], node_s[j]);
                let prod = kv.matvec(&node_x[j]);
                for d in 0..dim {
                    integral[d] += prod[d] * node_w[j];
                }
            }
            let v: Vec<C> = (0..dim).map(|d| boundary_vals[k][d] - integral[d]).collect();
            let delta: Vec<C> = (0..dim).map(|d| v[d] - x[k][d]).collect();
            diff = diff.max(vec_norm(&delta));
            next.push(v);
        }
        x = next;
        sup_diffs.push(diff);

        if diff < opts.tol {
            let sup_error = diff / (1.0 - lambda)
                + tail_bound * vec_norm(&boundary_limit).max(1.0) / (1.0 - lambda);
            return Ok(GridSolution {
                grid: grid.to_vec(),
                values: x,
                tail: boundary_limit,
                sup_error,
                iterations: iter,
                sup_diffs,
            });
        }
        if diff >= last {
            stalled += 1;
            if stalled >= 5 {
                return Err(VolterraError::Diverging {
                    stalled,
                    last_diff: diff,
                });
            }
        } else {
            stalled = 0;
        }
        last = diff;
    }
    Err(VolterraError::IterationLimit {
        max_iters: opts.max_iters,
        last_diff: last,
    })
}

/// Finite-interval transport problem
/// `x(t) = Phi(t) x(b) - int_t^b K(t, tau) x(tau) d tau` on `[a_end, b_end]`
/// with the terminal value given at `b_end` and `Phi` the supplied leading
/// propagator `Phi(t, b_end)`.
pub struct FiniteProblem<FP, FK>
where
    FP: Fn(f64) -> CMat,
    FK: Fn(f64, f64) -> CMat,
{
    pub dim: usize,
    pub a_end: f64,
    pub b_end: f64,
    pub propagator: FP,
    pub kernel: FK,
}

pub fn solve_finite<FP, FK>(
    problem: &FiniteProblem<FP, FK>,
    terminal: &[C],
    n_grid: usize,
    opts: &SolveOpts,
) -> Result<GridSolution, VolterraError>
where
    FP: Fn(f64) -> CMat,
    FK: Fn(f64, f64) -> CMat,
{
    if problem.b_end <= problem.a_end {
        return Err(VolterraError::InvalidProblem(
            "b_end must exceed a_end".into(),
        ));
    }
    let n = n_grid.max(8);
    let grid: Vec<f64> = (0..n)
        .map(|k| problem.a_end + (problem.b_end - problem.a_end) * k as f64 / (n as f64 - 1.0))
        .collect();
    let gl = GaussLegendre::<f64>::new(4);
    let lambda = lambda_on_grid(&problem.kernel, 0.0, &grid, &gl);
    if LAMBDA_SAFETY * lambda >= 1.0 {
        return Err(VolterraError::ContractionFailure {
            lambda,
            with_margin: LAMBDA_SAFETY * lambda,
        });
    }

    let boundary_vals: Vec<Vec<C>> = grid
        .iter()
        .map(|&t| (problem.propagator)(t).matvec(terminal))
        .collect();
    let start = boundary_vals.clone();
    iterate(
        problem.dim,
        &grid,
        &boundary_vals,
        terminal.to_vec(),
        &problem.kernel,
        start,
        lambda,
        0.0,
        opts,
        &gl,
    )
}

/// Parameter-derivative equation: given the base solution `x`, solve
///
/// ```text
/// dx(t) = [ da(t) - int_t^inf dK(t,s) x(s) ds ] - int_t^inf K(t,s) dx(s) ds .
/// ```
pub fn solve_derivative<FA, FK, FDA, FDK>(
    problem: &IvpAtInfinity<FA, FK>,
    d_boundary: FDA,
    d_boundary_limit: Vec<C>,
    d_kernel: FDK,
    base: &GridSolution,
    grid_spec: &GridSpec,
    opts: &SolveOpts,
) -> Result<GridSolution, VolterraError>
where
    FA: Fn(f64) -> Vec<C>,
    FK: Fn(f64, f64) -> CMat,
    FDA: Fn(f64) -> Vec<C>,
    FDK: Fn(f64, f64) -> CMat,
{
    let grid = grid_spec.build(problem.t_start, problem.t_max);
    let gl = GaussLegendre::<f64>::new(4);
    let n = grid.len();

    // effective boundary term of the derived equation, tabulated on the grid
    let mut eff = Vec::with_capacity(n);
    for k in 0..n {
        let mut integral = vec![C::new(0.0, 0.0); problem.dim];
        for j in k..n - 1 {
            let (a, b) = (grid[j], grid[j + 1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
                let s = mid + half * x;
                let prod = d_kernel(grid[k], s).matvec(&base.eval(s));
                for d in 0..problem.dim {
                    integral[d] += prod[d] * (w * half);
                }
            }
        }
        let da = d_boundary(grid[k]);
        eff.push(
            (0..problem.dim)
                .map(|d| da[d] - integral[d])
                .collect::<Vec<C>>(),
        );
    }

    let lambda = lambda_on_grid(&problem.kernel, problem.tail_bound, &grid, &gl);
    if LAMBDA_SAFETY * lambda >= 1.0 {
        return Err(VolterraError::ContractionFailure {
            lambda,
            with_margin: LAMBDA_SAFETY * lambda,
        });
    }
    let start = eff.clone();
    iterate(
        problem.dim,
        &grid,
        &eff,
        d_boundary_limit,
        &problem.kernel,
        start,
        lambda,
        problem.tail_bound,
        opts,
        &gl,
    )
}

/// Scalar helper for one-dimensional problems.
pub fn scalar(z: f64) -> C {
    Complex64::new(z, 0.0)
}

/// Product-type problem whose propagator factor is a semigroup:
/// `K(t,s) = diag(e^{L(t) - L(s)}, 1) B(s)` with `Re L` nondecreasing.
///
/// This is the kernel structure of the flatness equation after detaching
/// the leading term; the backward recurrence below makes each Picard sweep
/// linear in the grid size, and only differences `L(t_k) - L(t_{k+1})`
/// with nonpositive real part are ever exponentiated.
pub struct SemigroupIvp<FL, FB>
where
    FL: Fn(f64) -> C,
    FB: Fn(f64) -> CMat,
{
    pub t_start: f64,
    pub t_max: f64,
    pub boundary_limit: Vec<C>,
    /// Cumulative exponent `L(t)` (primitive of the full leading rate).
    pub lambda: FL,
    /// The integrally bounded factor `B(s)` (2x2).
    pub b: FB,
    pub tail_bound: f64,
}

pub struct SemigroupSolution {
    pub solution: GridSolution,
    pub lambda_bound: f64,
}

pub fn solve_ivp_semigroup<FL, FB>(
    problem: &SemigroupIvp<FL, FB>,
    grid_spec: &GridSpec,
    opts: &SolveOpts,
) -> Result<SemigroupSolution, VolterraError>
where
    FL: Fn(f64) -> C,
    FB: Fn(f64) -> CMat,
{
    if problem.t_max <= problem.t_start {
        return Err(VolterraError::InvalidProblem(
            "t_max must exceed t_start".into(),
        ));
    }
    let grid = grid_spec.build(problem.t_start, problem.t_max);
    let n = grid.len();
    let gl = GaussLegendre::<f64>::new(4);
    let per = gl.nodes.len();

    // per-interval Gauss nodes: positions, weights, B values, exponents
    let mut node_s = Vec::with_capacity((n - 1) * per);
    let mut node_w = Vec::with_capacity((n - 1) * per);
    for j in 0..n - 1 {
        let (a, b) = (grid[j], grid[j + 1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
            node_s.push(mid + half * x);
            node_w.push(w * half);
        }
    }
    let node_b: Vec<CMat> = node_s.iter().map(|&s| (problem.b)(s)).collect();
    let lam_grid: Vec<C> = grid.iter().map(|&t| (problem.lambda)(t)).collect();
    let lam_node: Vec<C> = node_s.iter().map(|&s| (problem.lambda)(s)).collect();

    // contraction estimate: |diag factor| <= 1, so the cumulative tail of
    // ||B|| from the right bounds lambda
    let mut lambda_bound = problem.tail_bound;
    {
        let mut acc = problem.tail_bound;
        for j in (0..node_s.len()).rev() {
            acc += node_b[j].op_norm() * node_w[j];
            lambda_bound = lambda_bound.max(acc);
        }
    }
    if LAMBDA_SAFETY * lambda_bound >= 1.0 {
        return Err(VolterraError::ContractionFailure {
            lambda: lambda_bound,
            with_margin: LAMBDA_SAFETY * lambda_bound,
        });
    }

    let a_vec = problem.boundary_limit.clone();
    let mut x: Vec<Vec<C>> = vec![a_vec.clone(); n];
    let mut sup_diffs = Vec::new();
    let mut stalled = 0usize;
    let mut last = f64::INFINITY;

    for iter in 1..=opts.max_iters {
        let cur = GridSolution {
            grid: grid.clone(),
            values: x.clone(),
            tail: a_vec.clone(),
            sup_error: 0.0,
            iterations: iter,
            sup_diffs: vec![],
        };
        let node_x: Vec<Vec<C>> = node_s.iter().map(|&s| cur.eval(s)).collect();

        // backward recurrence over intervals
        let mut i1 = Complex64::new(0.0, 0.0);
        let mut i2 = Complex64::new(0.0, 0.0);
        let mut next = vec![vec![Complex64::new(0.0, 0.0); 2]; n];
        next[n - 1] = a_vec.clone();
        for k in (0..n - 1).rev() {
            let mut seg1 = Complex64::new(0.0, 0.0);
            let mut seg2 = Complex64::new(0.0, 0.0);
            for j in k * per..(k + 1) * per {
                let bx = node_b[j].matvec(&node_x[j]);
                seg1 += (lam_grid[k] - lam_node[j]).exp() * bx[0] * node_w[j];
                seg2 += bx[1] * node_w[j];
            }
            i1 = seg1 + (lam_grid[k] - lam_grid[k + 1]).exp() * i1;
            i2 = seg2 + i2;
            next[k][0] = a_vec[0] - i1;
            next[k][1] = a_vec[1] - i2;
        }

        let mut diff = 0.0f64;
        for k in 0..n {
            let d = ((next[k][0] - x[k][0]).norm_sqr() + (next[k][1] - x[k][1]).norm_sqr())
                .sqrt();
            diff = diff.max(d);
        }
        x = next;
        sup_diffs.push(diff);
        if diff < opts.tol {
            let sup_error = diff / (1.0 - lambda_bound)
                + problem.tail_bound * vec_norm(&a_vec).max(1.0) / (1.0 - lambda_bound);
            return Ok(SemigroupSolution {
                solution: GridSolution {
                    grid,
                    values: x,
                    tail: a_vec,
                    sup_error,
                    iterations: iter,
                    sup_diffs,
                },
                lambda_bound,
            });
        }
        if diff >= last {
            stalled += 1;
            if stalled >= 5 {
                return Err(VolterraError::Diverging {
                    stalled,
                    last_diff: diff,
                });
            }
        } else {
            stalled = 0;
        }
        last = diff;
    }
    Err(VolterraError::IterationLimit {
        max_iters: opts.max_iters,
        last_diff: last,
    })
}

/// Derivative companion of [`solve_ivp_semigroup`]: the kernel is shared,
/// the effective boundary term is `-int diag(e^{L(t)-L(s)},1) dB(s) x(s) ds`
/// plus an optional explicit `d a`.
pub fn solve_derivative_semigroup<FL, FB, FDB>(
    problem: &SemigroupIvp<FL, FB>,
    d_b: FDB,
    d_boundary_limit: Vec<C>,
    base: &GridSolution,
    grid_spec: &GridSpec,
    opts: &SolveOpts,
) -> Result<SemigroupSolution, VolterraError>
where
    FL: Fn(f64) -> C,
    FB: Fn(f64) -> CMat,
    FDB: Fn(f64) -> CMat,
{
    let grid = grid_spec.build(problem.t_start, problem.t_max);
    let n = grid.len();
    let gl = GaussLegendre::<f64>::new(4);
    let per = gl.nodes.len();
    let mut node_s = Vec::new();
    let mut node_w = Vec::new();
    for j in 0..n - 1 {
        let (a, b) = (grid[j], grid[j + 1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
            node_s.push(mid + half * x);
            node_w.push(w * half);
        }
    }
    let lam_grid: Vec<C> = grid.iter().map(|&t| (problem.lambda)(t)).collect();
    let lam_node: Vec<C> = node_s.iter().map(|&s| (problem.lambda)(s)).collect();

    // effective boundary: backward recurrence on dB * x_base
    let mut eff = vec![vec![Complex64::new(0.0, 0.0); 2]; n];
    eff[n - 1] = d_boundary_limit.clone();
    let mut i1 = Complex64::new(0.0, 0.0);
    let mut i2 = Complex64::new(0.0, 0.0);
    for k in (0..n - 1).rev() {
        let mut seg1 = Complex64::new(0.0, 0.0);
        let mut seg2 = Complex64::new(0.0, 0.0);
        for j in k * per..(k + 1) * per {
            let bx = d_b(node_s[j]).matvec(&base.eval(node_s[j]));
            seg1 += (lam_grid[k] - lam_node[j]).exp() * bx[0] * node_w[j];
            seg2 += bx[1] * node_w[j];
        }
        i1 = seg1 + (lam_grid[k] - lam_grid[k + 1]).exp() * i1;
        i2 = seg2 + i2;
        eff[k][0] = d_boundary_limit[0] - i1;
        eff[k][1] = d_boundary_limit[1] - i2;
    }

    // solve the derived equation with the same kernel and the effective
    // boundary interpolated from the grid table
    let eff_sol = GridSolution {
        grid: grid.clone(),
        values: eff,
        tail: d_boundary_limit.clone(),
        sup_error: 0.0,
        iterations: 0,
        sup_diffs: vec![],
    };
    let shifted = SemigroupIvp {
        t_start: problem.t_start,
        t_max: problem.t_max,
        boundary_limit: d_boundary_limit,
        lambda: &problem.lambda,
        b: &problem.b,
        tail_bound: problem.tail_bound,
    };
    solve_semigroup_with_boundary(&shifted, &eff_sol, grid_spec, opts)
}

fn solve_semigroup_with_boundary<FL, FB>(
    problem: &SemigroupIvp<FL, FB>,
    boundary: &GridSolution,
    grid_spec: &GridSpec,
    opts: &SolveOpts,
) -> Result<SemigroupSolution, VolterraError>
where
    FL: Fn(f64) -> C,
    FB: Fn(f64) -> CMat,
{
    let grid = grid_spec.build(problem.t_start, problem.t_max);
    let n = grid.len();
    let gl = GaussLegendre::<f64>::new(4);
    let per = gl.nodes.len();
    let mut node_s = Vec::new();
    let mut node_w = Vec::new();
    for j in 0..n - 1 {
        let (a, b) = (grid[j], grid[j + 1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
            node_s.push(mid + half * x);
            node_w.push(w * half);
        }
    }
    let node_b: Vec<CMat> = node_s.iter().map(|&s| (problem.b)(s)).collect();
    let lam_grid: Vec<C> = grid.iter().map(|&t| (problem.lambda)(t)).collect();
    let lam_node: Vec<C> = node_s.iter().map(|&s| (problem.lambda)(s)).collect();

    let mut lambda_bound = problem.tail_bound;
    {
        let mut acc = problem.tail_bound;
        for j in (0..node_s.len()).rev() {
            acc += node_b[j].op_norm() * node_w[j];
            lambda_bound = lambda_bound.max(acc);
        }
    }
    if LAMBDA_SAFETY * lambda_bound >= 1.0 {
        return Err(VolterraError::ContractionFailure {
            lambda: lambda_bound,
            with_margin: LAMBDA_SAFETY * lambda_bound,
        });
    }

    let a_of: Vec<Vec<C>> = grid.iter().map(|&t| boundary.eval(t)).collect();
    let mut x = a_of.clone();
    let mut sup_diffs = Vec::new();
    let mut stalled = 0usize;
    let mut last = f64::INFINITY;
    for iter in 1..=opts.max_iters {
        let cur = GridSolution {
            grid: grid.clone(),
            values: x.clone(),
            tail: problem.boundary_limit.clone(),
            sup_error: 0.0,
            iterations: iter,
            sup_diffs: vec![],
        };
        let node_x: Vec<Vec<C>> = node_s.iter().map(|&s| cur.eval(s)).collect();
        let mut i1 = Complex64::new(0.0, 0.0);
        let mut i2 = Complex64::new(0.0, 0.0);
        let mut next = vec![vec![Complex64::new(0.0, 0.0); 2]; n];
        next[n - 1] = a_of[n - 1].clone();
        for k in (0..n - 1).rev() {
            let mut seg1 = Complex64::new(0.0, 0.0);
            let mut seg2 = Complex64::new(0.0, 0.0);
            for j in k * per..(k + 1) * per {
                let bx = node_b[j].matvec(&node_x[j]);
                seg1 += (lam_grid[k] - lam_node[j]).exp() * bx[0] * node_w[j];
                seg2 += bx[1] * node_w[j];
            }
            i1 = seg1 + (lam_grid[k] - lam_grid[k + 1]).exp() * i1;
            i2 = seg2 + i2;
            next[k][0] = a_of[k][0] - i1;
            next[k][1] = a_of[k][1] - i2;
        }
        let mut diff = 0.0f64;
        for k in 0..n {
            let d = ((next[k][0] - x[k][0]).norm_sqr() + (next[k][1] - x[k][1]).norm_sqr())
                .sqrt();
            diff = diff.max(d);
        }
        x = next;
        sup_diffs.push(diff);
        if diff < opts.tol {
            let sup_error = diff / (1.0 - lambda_bound);
            return Ok(SemigroupSolution {
                solution: GridSolution {
                    grid,
                    values: x,
                    tail: problem.boundary_limit.clone(),
                    sup_error,
                    iterations: iter,
                    sup_diffs,
                },
                lambda_bound,
            });
        }
        if diff >= last {
            stalled += 1;
            if stalled >= 5 {
                return Err(VolterraError::Diverging {
                    stalled,
                    last_diff: diff,
                });
            }
        } else {
            stalled = 0;
        }
        last = diff;
    }
    Err(VolterraError::IterationLimit {
        max_iters: opts.max_iters,
        last_diff: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_kernel_problem(
        c: f64,
        t_max: f64,
    ) -> IvpAtInfinity<impl Fn(f64) -> Vec<C>, impl Fn(f64, f64) -> CMat> {
        IvpAtInfinity {
            dim: 1,
            t_start: 0.0,
            t_max,
            boundary: |_t| vec![scalar(1.0)],
            boundary_limit: vec![scalar(1.0)],
            kernel: move |_t, s: f64| CMat {
                n: 1,
                a: vec![scalar(c * (-s).exp())],
            },
            tail_bound: c * (-t_max).exp(),
        }
    }

    fn fine_grid() -> GridSpec {
        GridSpec {
            initial_step: 5e-3,
            growth: 1.05,
            max_step: 0.08,
        }
    }

    #[test]
    fn closed_form_exponential_kernel() {
        // x(t) = exp(-0.5 e^{-t})
        let problem = exp_kernel_problem(0.5, 40.0);
        let sol = solve_ivp_infinity(&problem, &fine_grid(), &SolveOpts::default()).unwrap();
        let mut worst = 0.0f64;
        for (k, &t) in sol.grid.iter().enumerate() {
            if t > 10.0 {
                break;
            }
            let exact = (-0.5 * (-t).exp()).exp();
            worst = worst.max((sol.values[k][0].re - exact).abs());
        }
        assert!(worst < 1e-9, "sup error {worst}");
        // x(0) = exp(-0.5) = 0.6065306597126334
        assert!((sol.values[0][0].re - 0.6065306597126334).abs() < 1e-9);
    }

    #[test]
    fn picard_bound_and_contraction() {
        let problem = exp_kernel_problem(0.5, 40.0);
        let (lambda, bound) = picard_bound(&problem, &GridSpec::default());
        assert!((lambda - 0.5).abs() < 1e-6, "lambda {lambda}");
        assert!((bound - 2.0).abs() < 1e-5, "bound {bound}");
        let sol =
            solve_ivp_infinity(&problem, &GridSpec::default(), &SolveOpts::default()).unwrap();
        assert!(sol.sup_norm() <= bound + 1e-9);
    }

    #[test]
    fn zero_kernel_returns_boundary() {
        let problem = IvpAtInfinity {
            dim: 1,
            t_start: 0.0,
            t_max: 5.0,
            boundary: |t: f64| vec![scalar((0.3 * t).sin() + 2.0)],
            boundary_limit: vec![scalar(2.0)],
            kernel: |_t, _s| CMat::zeros(1),
            tail_bound: 0.0,
        };
        let sol =
            solve_ivp_infinity(&problem, &GridSpec::default(), &SolveOpts::default()).unwrap();
        for (k, &t) in sol.grid.iter().enumerate() {
            assert!((sol.values[k][0].re - ((0.3 * t).sin() + 2.0)).abs() < 1e-14);
        }
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn zero_boundary_gives_zero() {
        let problem = IvpAtInfinity {
            dim: 1,
            t_start: 0.0,
            t_max: 20.0,
            boundary: |_t| vec![scalar(0.0)],
            boundary_limit: vec![scalar(0.0)],
            kernel: |_t, s: f64| CMat {
                n: 1,
                a: vec![scalar(0.5 * (-s).exp())],
            },
            tail_bound: 1e-9,
        };
        let sol =
            solve_ivp_infinity(&problem, &GridSpec::default(), &SolveOpts::default()).unwrap();
        assert!(sol.sup_norm() < 1e-14);
    }

    #[test]
    fn doubled_kernel_is_refused() {
        // lambda = 1 at t = 0 for kernel e^{-s}
        let problem = exp_kernel_problem(1.0, 40.0);
        let err = solve_ivp_infinity(&problem, &GridSpec::default(), &SolveOpts::default())
            .unwrap_err();
        match err {
            VolterraError::ContractionFailure { lambda, .. } => {
                assert!((lambda - 1.0).abs() < 1e-3, "lambda {lambda}")
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn geometric_picard_decay() {
        let problem = exp_kernel_problem(0.5, 40.0);
        let sol =
            solve_ivp_infinity(&problem, &GridSpec::default(), &SolveOpts::default()).unwrap();
        for w in sol.sup_diffs.windows(2) {
            if w[0] < 1e-13 {
                break;
            }
            assert!(
                w[1] <= (0.5 + 0.05) * w[0],
                "non-geometric step {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn uniqueness_from_different_starts() {
        let problem = exp_kernel_problem(0.5, 40.0);
        let opts = SolveOpts {
            tol: 1e-13,
            max_iters: 500,
        };
        let a = solve_ivp_infinity(&problem, &GridSpec::default(), &opts).unwrap();
        let b = solve_ivp_infinity_from(&problem, &GridSpec::default(), &opts, |t| {
            vec![scalar(2.0 + (1.7 * t).cos())]
        })
        .unwrap();
        let c = solve_ivp_infinity_from(&problem, &GridSpec::default(), &opts, |_| {
            vec![scalar(0.0)]
        })
        .unwrap();
        let mut d = 0.0f64;
        for k in 0..a.grid.len() {
            d = d.max((a.values[k][0] - b.values[k][0]).norm());
            d = d.max((a.values[k][0] - c.values[k][0]).norm());
        }
        assert!(d < 1e-10, "solutions differ by {d}");
    }

    #[test]
    fn continuous_dependence_bound() {
        let problem = exp_kernel_problem(0.5, 40.0);
        let eta = 1e-3;
        let perturbed = IvpAtInfinity {
            dim: 1,
            t_start: 0.0,
            t_max: 40.0,
            boundary: move |t: f64| vec![scalar(1.0 + eta / (t + 1.0))],
            boundary_limit: vec![scalar(1.0)],
            kernel: |_t, s: f64| CMat {
                n: 1,
                a: vec![scalar(0.5 * (-s).exp())],
            },
            tail_bound: 0.5 * (-40.0f64).exp(),
        };
        let opts = SolveOpts::default();
        let a = solve_ivp_infinity(&problem, &GridSpec::default(), &opts).unwrap();
        let b = solve_ivp_infinity(&perturbed, &GridSpec::default(), &opts).unwrap();
        let mut d = 0.0f64;
        for k in 0..a.grid.len() {
            d = d.max((a.values[k][0] - b.values[k][0]).norm());
        }
        assert!(d <= eta / (1.0 - 0.5) + 1e-9, "dependence violated: {d}");
    }

    #[test]
    fn finite_interval_zero_kernel_and_ode_oracle() {
        // K = 0, Phi = identity: x(t) = x(b) everywhere
        let problem = FiniteProblem {
            dim: 1,
            a_end: 0.0,
            b_end: 1.0,
            propagator: |_t| CMat::identity(1),
            kernel: |_t, _s| CMat::zeros(1),
        };
        let sol = solve_finite(&problem, &[scalar(1.0)], 64, &SolveOpts::default()).unwrap();
        for v in &sol.values {
            assert!((v[0].re - 1.0).abs() < 1e-14);
        }

        // scalar K = 0.1 on [0,1]: equivalent to x' = 0.1 x with x(1) = 1,
        // so x(t) = e^{0.1(t-1)}
        let problem = FiniteProblem {
            dim: 1,
            a_end: 0.0,
            b_end: 1.0,
            propagator: |_t| CMat::identity(1),
            kernel: |_t, _s| CMat {
                n: 1,
                a: vec![scalar(0.1)],
            },
        };
        let sol = solve_finite(&problem, &[scalar(1.0)], 256, &SolveOpts::default()).unwrap();
        for (k, &t) in sol.grid.iter().enumerate() {
            let oracle = (0.1 * (t - 1.0)).exp();
            assert!(
                (sol.values[k][0].re - oracle).abs() < 1e-10,
                "t = {t}: {} vs {}",
                sol.values[k][0].re,
                oracle
            );
        }
    }

    #[test]
    fn derivative_matches_closed_form_and_fd() {
        // K(t,s,eps) = eps e^{-s}, a = 1 -> x(t,eps) = exp(-eps e^{-t});
        // d_eps x(0) at eps = 0.5 is -e^{-0.5}
        let eps = 0.5;
        let problem = exp_kernel_problem(eps, 40.0);
        let gs = fine_grid();
        let opts = SolveOpts::default();
        let base = solve_ivp_infinity(&problem, &gs, &opts).unwrap();
        let dsol = solve_derivative(
            &problem,
            |_t| vec![scalar(0.0)],
            vec![scalar(0.0)],
            |_t, s: f64| CMat {
                n: 1,
                a: vec![scalar((-s).exp())],
            },
            &base,
            &gs,
            &opts,
        )
        .unwrap();
        let want = -(-0.5f64).exp();
        assert!(
            (dsol.values[0][0].re - want).abs() < 1e-6,
            "{} vs {want}",
            dsol.values[0][0].re
        );

        // cross-check against central finite differences of the base solver
        let h = 1e-5;
        let xp = solve_ivp_infinity(&exp_kernel_problem(eps + h, 40.0), &gs, &opts).unwrap();
        let xm = solve_ivp_infinity(&exp_kernel_problem(eps - h, 40.0), &gs, &opts).unwrap();
        let fd = (xp.values[0][0].re - xm.values[0][0].re) / (2.0 * h);
        assert!(
            (dsol.values[0][0].re - fd).abs() < 1e-6,
            "solver {} vs fd {fd}",
            dsol.values[0][0].re
        );
    }

    #[test]
    fn derivative_zero_data_gives_zero() {
        let problem = exp_kernel_problem(0.5, 30.0);
        let gs = GridSpec::default();
        let opts = SolveOpts::default();
        let base = solve_ivp_infinity(&problem, &gs, &opts).unwrap();
        let dsol = solve_derivative(
            &problem,
            |_t| vec![scalar(0.0)],
            vec![scalar(0.0)],
            |_t, _s| CMat::zeros(1),
            &base,
            &gs,
            &opts,
        )
        .unwrap();
        assert!(dsol.sup_norm() < 1e-14);
    }

    #[test]
    fn semigroup_solver_matches_generic() {
        // scalar-exponent 2x2 problem with nontrivial coupling, solved by
        // both paths
        let lam = |t: f64| scalar(2.0 * t);
        let bmat = |s: f64| CMat {
            n: 2,
            a: vec![
                scalar(0.2 * (-s).exp()),
                C::new(0.1, 0.05) * (-1.3 * s).exp(),
                C::new(-0.07, 0.12) * (-0.8 * s).exp(),
                scalar(-0.2 * (-s).exp()),
            ],
        };
        let sg = SemigroupIvp {
            t_start: 0.0,
            t_max: 30.0,
            boundary_limit: vec![scalar(0.0), scalar(1.0)],
            lambda: lam,
            b: bmat,
            tail_bound: 1e-12,
        };
        let gs = GridSpec {
            initial_step: 2e-3,
            growth: 1.08,
            max_step: 0.05,
        };
        let opts = SolveOpts::default();
        let fast = solve_ivp_semigroup(&sg, &gs, &opts).unwrap();

        let generic = IvpAtInfinity {
            dim: 2,
            t_start: 0.0,
            t_max: 30.0,
            boundary: |_t| vec![scalar(0.0), scalar(1.0)],
            boundary_limit: vec![scalar(0.0), scalar(1.0)],
            kernel: move |t: f64, s: f64| {
                let b = bmat(s);
                let e = (lam(t) - lam(s)).exp();
                CMat {
                    n: 2,
                    a: vec![e * b.a[0], e * b.a[1], b.a[2], b.a[3]],
                }
            },
            tail_bound: 1e-12,
        };
        let slow = solve_ivp_infinity(&generic, &gs, &opts).unwrap();
        let mut worst = 0.0f64;
        for (k, &t) in fast.solution.grid.iter().enumerate() {
            let a = &fast.solution.values[k];
            let b = slow.eval(t);
            worst = worst
                .max((a[0] - b[0]).norm())
                .max((a[1] - b[1]).norm());
        }
        assert!(worst < 1e-10, "solver discrepancy {worst}");
    }

    #[test]
    fn semigroup_derivative_matches_fd() {
        let lam = |t: f64| scalar(2.0 * t);
        let make_b = |c: f64| {
            move |s: f64| CMat {
                n: 2,
                a: vec![
                    scalar(c * (-s).exp()),
                    scalar(0.0),
                    scalar(c * 0.5 * (-s).exp()),
                    scalar(-c * (-s).exp()),
                ],
            }
        };
        let gs = GridSpec {
            initial_step: 2e-3,
            growth: 1.08,
            max_step: 0.05,
        };
        let opts = SolveOpts::default();
        let c0 = 0.3;
        let sg = SemigroupIvp {
            t_start: 0.0,
            t_max: 30.0,
            boundary_limit: vec![scalar(0.0), scalar(1.0)],
            lambda: lam,
            b: make_b(c0),
            tail_bound: 1e-12,
        };
        let base = solve_ivp_semigroup(&sg, &gs, &opts).unwrap();
        // dB/dc = B/c at c = c0
        let d = solve_derivative_semigroup(
            &sg,
            make_b(1.0),
            vec![scalar(0.0), scalar(0.0)],
            &base.solution,
            &gs,
            &opts,
        )
        .unwrap();
        let h = 1e-5;
        let plus = solve_ivp_semigroup(
            &SemigroupIvp {
                t_start: 0.0,
                t_max: 30.0,
                boundary_limit: vec![scalar(0.0), scalar(1.0)],
                lambda: lam,
                b: make_b(c0 + h),
                tail_bound: 1e-12,
            },
            &gs,
            &opts,
        )
        .unwrap();
        let minus = solve_ivp_semigroup(
            &SemigroupIvp {
                t_start: 0.0,
                t_max: 30.0,
                boundary_limit: vec![scalar(0.0), scalar(1.0)],
                lambda: lam,
                b: make_b(c0 - h),
                tail_bound: 1e-12,
            },
            &gs,
            &opts,
        )
        .unwrap();
        for k in [0usize, 17, 80] {
            for d_idx in 0..2 {
                let fd = (plus.solution.values[k][d_idx] - minus.solution.values[k][d_idx])
                    / (2.0 * h);
                let got = d.solution.values[k][d_idx];
                assert!(
                    (fd - got).norm() < 1e-7,
                    "k {k} comp {d_idx}: {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn holomorphic_dependence_cauchy_riemann() {
        // kernel eps * e^{-s} with complex eps; closed form exp(-eps e^{-t})
        let solve_at = |eps: C| -> C {
            let problem = IvpAtInfinity {
                dim: 1,
                t_start: 0.0,
                t_max: 40.0,
                boundary: |_t| vec![scalar(1.0)],
                boundary_limit: vec![scalar(1.0)],
                kernel: move |_t, s: f64| CMat {
                    n: 1,
                    a: vec![eps * (-s).exp()],
                },
                tail_bound: eps.norm() * (-40.0f64).exp(),
            };
            let sol = solve_ivp_infinity(&problem, &GridSpec::default(), &SolveOpts::default())
                .unwrap();
            sol.values[0][0]
        };
        let e0 = C::new(0.4, 0.1);
        let h = 1e-5;
        let dre = (solve_at(e0 + scalar(h)) - solve_at(e0 - scalar(h))) / (2.0 * h);
        let dim_ =
            (solve_at(e0 + C::new(0.0, h)) - solve_at(e0 - C::new(0.0, h))) / C::new(0.0, 2.0 * h);
        let residual = (dre - dim_).norm();
        assert!(residual < 1e-6, "Cauchy-Riemann residual {residual}");
    }
}
