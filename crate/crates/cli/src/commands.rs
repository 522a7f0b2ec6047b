//! Command implementations: each one loads the configuration, runs its
//! pipeline, writes CSV/JSON/SVG artifacts and prints a one-line summary.

use hktwist::config::{ConfigError, RunConfig};
use hktwist::export::{
    self, csv_decay_sweep, csv_grid_solution, csv_ray_tables, csv_trajectory, fmt_f64, SvgScene,
    SvgStyle,
};
use hktwist::lattice::{tba_solve, Charge, TbaOpts};
use hktwist::metric::{decay_sweep as run_decay, extract_metric, semiflat_metric, VarpiOpts};
use hktwist::quaddiff::{
    classify, find_saddles, period, separatrices as quad_separatrices, trace_full, StopRules,
};
use hktwist::sections::{
    build_quadrilateral, check_reality, presets, small_flat_section, transport_section,
    x_coordinate, QuadOptions, SectionKind,
};
use hktwist::volterra::{
    picard_bound, solve_ivp_infinity, CMat, GridSpec, IvpAtInfinity, SolveOpts,
};
use num_complex::Complex64;
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::path::PathBuf;

pub struct Context {
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub verbose: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => crate::EXIT_VALIDATION,
            CliError::Numerical(_) => crate::EXIT_NUMERICAL,
            CliError::Io(_) => crate::EXIT_NUMERICAL,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

impl Context {
    fn load_config(&self) -> Result<RunConfig> {
        match &self.config_path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Validation(format!("cannot read config {}: {e}", p.display()))
                })?;
                Ok(RunConfig::from_json(&text)?)
            }
        }
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(name);
        std::fs::write(&path, contents)?;
        if self.verbose {
            eprintln!("wrote {}", path.display());
        }
        Ok(path)
    }

    fn write_json(&self, name: &str, value: &Value) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Numerical(format!("serialization failed: {e}")))?;
        text.push('\n');
        self.write(name, &text)
    }
}

fn require<'a, T>(field: &'a Option<T>, name: &str) -> Result<&'a T> {
    field
        .as_ref()
        .ok_or_else(|| CliError::Validation(format!("config is missing the `{name}` block")))
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

pub fn trace(ctx: &Context) -> Result<()> {
    let cfg = ctx.load_config()?;
    let qd = require(&cfg.quaddiff, "quaddiff")?;
    let q = qd.build()?;
    if qd.seeds.is_empty() {
        return Err(CliError::Validation(
            "quaddiff.seeds must list at least one trace seed".into(),
        ));
    }
    let stop = StopRules::for_differential(&q).with_budget(qd.budget);
    let mut trajectories = Vec::new();
    for (k, &seed) in qd.seeds.iter().enumerate() {
        let z0 = Complex64::new(seed[0], seed[1]);
        let traj = trace_full(&q, z0, qd.theta, None, &stop).map_err(numerical)?;
        ctx.write(&format!("trace_{k}.csv"), &csv_trajectory(&traj))?;
        trajectories.push(traj);
    }
    let scene = SvgScene {
        trajectories: trajectories.iter().collect(),
        zeros: q.zeros.clone(),
        poles: q.poles.clone(),
        rays: vec![],
    };
    ctx.write("trace.svg", &export::export_svg(&scene, &SvgStyle::default()))?;
    let classes: Vec<String> = trajectories
        .iter()
        .map(|t| format!("{:?}", classify(t)))
        .collect();
    println!(
        "trace: {} trajectories at theta = {} -> [{}]",
        trajectories.len(),
        qd.theta,
        classes.join(", ")
    );
    Ok(())
}

pub fn separatrices(ctx: &Context) -> Result<()> {
    let cfg = ctx.load_config()?;
    let qd = require(&cfg.quaddiff, "quaddiff")?;
    let q = qd.build()?;
    let stop = StopRules::for_differential(&q).with_budget(qd.budget);
    let seps = quad_separatrices(&q, qd.zero_index, qd.theta, &stop).map_err(numerical)?;
    for (j, t) in seps.trajectories.iter().enumerate() {
        ctx.write(&format!("separatrix_{j}.csv"), &csv_trajectory(t))?;
    }
    let scene = SvgScene {
        trajectories: seps.trajectories.iter().collect(),
        zeros: q.zeros.clone(),
        poles: q.poles.clone(),
        rays: vec![],
    };
    ctx.write(
        "separatrices.svg",
        &export::export_svg(&scene, &SvgStyle::default()),
    )?;
    println!(
        "separatrices: zero {} at theta = {} departs at [{}]{}",
        qd.zero_index,
        qd.theta,
        seps.departure_angles
            .iter()
            .map(|a| format!("{a:.6}"))
            .collect::<Vec<_>>()
            .join(", "),
        if seps.collision_warning {
            " (collision warning)"
        } else {
            ""
        }
    );
    Ok(())
}

pub fn saddles(ctx: &Context) -> Result<()> {
    let cfg = ctx.load_config()?;
    let qd = require(&cfg.quaddiff, "quaddiff")?;
    let q = qd.build()?;
    let grid = require(&qd.theta_grid, "quaddiff.theta_grid")?.values();
    let stop = StopRules::for_differential(&q).with_budget(qd.budget);
    let events = find_saddles(&q, &grid, 1e-6, &stop).map_err(numerical)?;
    let rows: Vec<Value> = events
        .iter()
        .map(|e| {
            json!({
                "theta_c": e.theta_c,
                "zeros": [e.zeros.0, e.zeros.1],
                "period": [e.period.re, e.period.im],
                "confident": e.confident,
            })
        })
        .collect();
    ctx.write_json("saddles.json", &json!({ "events": rows }))?;
    println!("saddles: found {} event(s) over {} angles", events.len(), grid.len());
    Ok(())
}

pub fn periods(ctx: &Context) -> Result<()> {
    let cfg = ctx.load_config()?;
    let qd = require(&cfg.quaddiff, "quaddiff")?;
    let q = qd.build()?;
    if qd.cycles.is_empty() {
        return Err(CliError::Validation(
            "quaddiff.cycles must list at least one cycle".into(),
        ));
    }
    let mut rows = Vec::new();
    for cycle in &qd.cycles {
        let pts: Vec<Complex64> = cycle.iter().map(|&p| Complex64::new(p[0], p[1])).collect();
        let seed = q.eval(pts[0]).sqrt();
        let z = period(&q, &pts, seed, 1e-12).map_err(numerical)?;
        rows.push(json!({ "Z": [z.re, z.im] }));
    }
    ctx.write_json("periods.json", &json!({ "periods": rows }))?;
    println!("periods: {} cycle(s) integrated", rows.len());
    Ok(())
}

pub fn volterra(ctx: &Context) -> Result<()> {
    // the closed-form benchmark problem: kernel 0.5 e^{-s}, a = 1
    let problem = IvpAtInfinity {
        dim: 1,
        t_start: 0.0,
        t_max: 40.0,
        boundary: |_t| vec![Complex64::new(1.0, 0.0)],
        boundary_limit: vec![Complex64::new(1.0, 0.0)],
        kernel: |_t, s: f64| CMat {
            n: 1,
            a: vec![Complex64::new(0.5 * (-s).exp(), 0.0)],
        },
        tail_bound: 0.5 * (-40.0f64).exp(),
    };
    let gs = GridSpec {
        initial_step: 5e-3,
        growth: 1.05,
        max_step: 0.08,
    };
    let (lambda, bound) = picard_bound(&problem, &gs);
    let sol = solve_ivp_infinity(&problem, &gs, &SolveOpts::default()).map_err(numerical)?;
    let mut worst = 0.0f64;
    for (k, &t) in sol.grid.iter().enumerate() {
        if t > 10.0 {
            break;
        }
        let exact = (-0.5 * (-t).exp()).exp();
        worst = worst.max((sol.values[k][0].re - exact).abs());
    }
    ctx.write("volterra_solution.csv", &csv_grid_solution(&sol))?;
    ctx.write_json(
        "volterra.json",
        &json!({
            "lambda": lambda,
            "picard_bound": bound,
            "iterations": sol.iterations,
            "sup_error_vs_closed_form": worst,
            "x_at_0": sol.values[0][0].re,
        }),
    )?;
    println!(
        "volterra: lambda = {lambda:.6}, sup error vs closed form = {worst:.3e} over [0,10], {} iterations",
        sol.iterations
    );
    if worst > 1e-8 {
        return Err(CliError::Numerical(format!(
            "closed-form benchmark off by {worst:.3e} (tolerance 1e-8)"
        )));
    }
    Ok(())
}

fn build_model_and_quad(
    ctx: &Context,
    cfg: &RunConfig,
) -> Result<(
    hktwist::sections::HiggsLocalModel,
    hktwist::sections::Quadrilateral,
)> {
    let mc = require(&cfg.model, "model")?;
    let model = mc.build(ctx.seed.or(cfg.seed))?;
    let quad = build_quadrilateral(
        &model.q,
        presets::THETA,
        presets::quadrilateral_seeds(),
        &QuadOptions::default(),
    )
    .map_err(numerical)?;
    Ok((model, quad))
}

pub fn sections(ctx: &Context) -> Result<()> {
    let cfg = ctx.load_config()?;
    let (model, quad) = build_model_and_quad(ctx, &cfg)?;
    let kinds = [
        SectionKind::Sink,
        SectionKind::Source,
        SectionKind::Sink,
        SectionKind::Source,
    ];
    let mut rows = Vec::new();
    for i in 0..4 {
        let from = quad.anchors_t[i].min(quad.connectors[i].t_foot);
        let s = small_flat_section(
            &model,
            &quad.sides[i].traj,
            quad.theta,
            kinds[i],
            quad.anchors_t[i],
            from,
        )
        .map_err(numerical)?;
        ctx.write(
            &format!("section_{i}_remainder.csv"),
            &csv_grid_solution(&s.remainder),
        )?;
        let tv = transport_section(&model, &s, &quad.sides[i].traj, &quad.connectors[i])
            .map_err(numerical)?;
        rows.push(json!({
            "side": i,
            "kind": format!("{:?}", kinds[i]),
            "remainder_sup": s.remainder_sup,
            "kernel_lambda": s.lambda_bound,
            "transport_epsilon": [tv.epsilon.re, tv.epsilon.im],
            "transport_leak": [tv.leak.re, tv.leak.im],
        }));
    }
    ctx.write_json("sections.json", &json!({ "sections": rows }))?;
    let sup = rows
        .iter()
        .map(|r| r["remainder_sup"].as_f64().unwrap_or(0.0))
        .fold(0.0f64, f64::max);
    println!("sections: 4 sides solved, max remainder sup = {sup:.3e}");
    Ok(())
}

pub fn xcoord(ctx: &Context) -> Result<()> {
    let cfg = ctx.load_config()?;
    let (model, quad) = build_model_and_quad(ctx, &cfg)?;
    let x = x_coordinate(&model, &quad).map_err(numerical)?;
    let reality = check_reality(&model, &quad).map_err(numerical)?;
    let mut sweep_rows = Vec::new();
    let mut slope = None;
    if let Some(mc) = &cfg.model {
        if mc.r_sweep.len() >= 2 {
            let mut pts = Vec::new();
            for &r in &mc.r_sweep {
                let mut m = model.clone();
                m.r = r;
                let xr = x_coordinate(&m, &quad).map_err(numerical)?;
                sweep_rows.push(json!({ "r": r, "r_q_abs": xr.r_q.norm() }));
                if xr.r_q.norm() > 0.0 {
                    pts.push((r, xr.r_q.norm().ln()));
                }
            }
            if pts.len() >= 2 {
                slope = Some(hktwist::metric::least_squares_slope(&pts));
            }
        }
    }
    ctx.write_json(
        "xcoord.json",
        &json!({
            "value": [x.value.re, x.value.im],
            "leading": [x.leading.re, x.leading.im],
            "r_q": [x.r_q.re, x.r_q.im],
            "Z": [x.z_period.re, x.z_period.im],
            "theta": x.theta_angle,
            "reality_residual": reality,
            "r_sweep": sweep_rows,
            "r_q_slope": slope,
        }),
    )?;
    println!(
        "xcoord: X = {:.6}{:+.6}i, |r_q| = {:.3e}, reality residual = {:.3e}{}",
        x.value.re,
        x.value.im,
        x.r_q.norm(),
        reality,
        match slope {
            Some(s) => format!(", r_q slope = {s:.4}"),
            None => String::new(),
        }
    );
    Ok(())
}

pub fn tba(ctx: &Context) -> Result<()> {
    let cfg = ctx.load_config()?;
    let sc = require(&cfg.spectrum, "spectrum")?;
    let (spectrum, tower_tail) = sc.build()?;
    let sol = tba_solve(&spectrum, sc.r, &TbaOpts::default()).map_err(numerical)?;
    ctx.write("tba_rays.csv", &csv_ray_tables(&sol))?;
    let zeta_ref = Complex64::new(-1.0, 0.0);
    let rank = spectrum.lattice.rank;
    let mut corr = Vec::new();
    for i in 0..rank {
        let g = Charge::unit(rank, i);
        let v = sol.log_correction(&g, zeta_ref, None).map_err(numerical)?;
        let bound = sol.correction_bound(&g, zeta_ref);
        corr.push(json!({
            "generator": i,
            "log_correction": [v.re, v.im],
            "bessel_bound": bound,
        }));
    }
    let rays: Vec<Value> = sol
        .rays
        .iter()
        .map(|r| {
            json!({
                "charge": r.charge.0,
                "angle": r.psi + std::f64::consts::PI,
                "nodes": r.y_nodes.len(),
            })
        })
        .collect();
    ctx.write_json(
        "tba.json",
        &json!({
            "iterations": sol.iterations,
            "sup_changes": sol.sup_changes,
            "rays": rays,
            "corrections_at_minus_one": corr,
            "tower_tail_bound": tower_tail,
        }),
    )?;
    let corr_norm = corr
        .iter()
        .map(|c| {
            let v = c["log_correction"].as_array().unwrap();
            (v[0].as_f64().unwrap().powi(2) + v[1].as_f64().unwrap().powi(2)).sqrt()
        })
        .fold(0.0f64, f64::max);
    println!(
        "tba: converged in {} iteration(s), {} active ray(s), max |log correction| at zeta=-1 = {:.3e}",
        sol.iterations,
        sol.rays.len(),
        corr_norm
    );
    Ok(())
}

pub fn metric(ctx: &Context) -> Result<()> {
    let cfg = ctx.load_config()?;
    let pc = require(&cfg.patch, "patch")?;
    let (patch, point) = pc.build()?;
    let opts = VarpiOpts::default();
    let twist = extract_metric(&patch, &point, &opts).map_err(numerical)?;
    let sf = semiflat_metric(&patch, &point, opts.h).map_err(numerical)?;
    let rel = twist.g.sub(&sf.g).frobenius() / sf.g.frobenius();
    ctx.write_json(
        "metric.json",
        &json!({
            "g": twist.g.a,
            "g_semiflat": sf.g.a,
            "eigenvalues": twist.eigenvalues,
            "asymmetry": twist.asymmetry,
            "i_squared_residual": twist.i_squared_residual,
            "relative_diff_to_semiflat": rel,
        }),
    )?;
    println!(
        "metric: |g - g_sf|/|g_sf| = {rel:.3e}, eigenvalues {:?}, I^2 residual {:.2e}",
        twist
            .eigenvalues
            .iter()
            .map(|e| (e * 1e6).round() / 1e6)
            .collect::<Vec<_>>(),
        twist.i_squared_residual
    );
    Ok(())
}

pub fn decay_sweep(ctx: &Context) -> Result<()> {
    let cfg = ctx.load_config()?;
    let pc = require(&cfg.patch, "patch")?;
    let sweep_cfg = require(&cfg.sweep, "sweep")?;
    let (patch, point) = pc.build()?;
    let opts = VarpiOpts::default();
    let sweep = run_decay(&patch, &point, &sweep_cfg.r_values, &opts).map_err(numerical)?;
    ctx.write("decay.csv", &csv_decay_sweep(&sweep))?;
    let slope = sweep.slope.unwrap_or(f64::NAN);
    let rel_err = ((slope - sweep.target_rate) / sweep.target_rate).abs();
    ctx.write_json(
        "decay.json",
        &json!({
            "slope": slope,
            "target_rate": sweep.target_rate,
            "relative_error": rel_err,
            "z_min": sweep.z_min,
            "envelope_constant": sweep.envelope_constant,
        }),
    )?;
    println!(
        "decay-sweep: slope = {slope:.4} vs target {:.4} (relative error {rel_err:.3})",
        sweep.target_rate
    );
    Ok(())
}

pub fn selftest(ctx: &Context) -> Result<()> {
    let seed = ctx.seed.unwrap_or(12345);
    let mut summary: Vec<(String, bool, String)> = Vec::new();
    let mut record = |name: &str, ok: bool, detail: String| {
        println!("selftest[{}] {}: {detail}", if ok { "ok" } else { "FAIL" }, name);
        summary.push((name.to_string(), ok, detail));
    };

    // periodic trajectory of q = -1/z^2
    {
        let q = hktwist::quaddiff::QuadraticDifferential::new(
            vec![],
            vec![Complex64::new(0.0, 0.0)],
            Complex64::new(-1.0, 0.0),
        )
        .map_err(numerical)?;
        let stop = StopRules::for_differential(&q);
        let traj = hktwist::quaddiff::trace_trajectory(
            &q,
            Complex64::new(1.0, 0.0),
            0.0,
            1,
            None,
            &stop,
        )
        .map_err(numerical)?;
        let ok = classify(&traj) == hktwist::quaddiff::TrajectoryClass::Periodic;
        ctx.write("selftest_circle.csv", &csv_trajectory(&traj))?;
        let scene = SvgScene {
            trajectories: vec![&traj],
            zeros: vec![],
            poles: q.poles.clone(),
            rays: vec![],
        };
        ctx.write("selftest_circle.svg", &export::export_svg(&scene, &SvgStyle::default()))?;
        record("circle", ok, format!("{} samples", traj.samples.len()));
    }

    // saddle of z^2 - 1 at pi/2
    {
        let q = hktwist::quaddiff::QuadraticDifferential::new(
            vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
            vec![],
            Complex64::new(1.0, 0.0),
        )
        .map_err(numerical)?;
        let stop = StopRules {
            max_arclength: 12.0,
            pole_capture: 1e-3,
            zero_capture: 1e-3,
            closure_radius: 1e-3,
            rel_tol: 1e-10,
            max_step: f64::INFINITY,
            dist_step_factor: 0.3,
        };
        let grid: Vec<f64> = (0..48).map(|k| std::f64::consts::PI * k as f64 / 48.0).collect();
        let events = find_saddles(&q, &grid, 1e-6, &stop).map_err(numerical)?;
        let ok = events.len() == 1
            && (events[0].theta_c - std::f64::consts::FRAC_PI_2).abs() < 1e-3;
        let rows: Vec<Value> = events
            .iter()
            .map(|e| {
                json!({
                    "theta_c": e.theta_c,
                    "zeros": [e.zeros.0, e.zeros.1],
                    "period": [e.period.re, e.period.im],
                })
            })
            .collect();
        ctx.write_json("selftest_saddles.json", &json!({ "events": rows }))?;
        record(
            "saddle",
            ok,
            format!("{} event(s)", events.len()),
        );
    }

    // volterra closed form
    {
        let res = volterra(ctx);
        record("volterra", res.is_ok(), "closed-form benchmark".into());
        res?;
    }

    // one-ray integral equation
    {
        let spectrum = hktwist::lattice::SpectrumData {
            lattice: hktwist::lattice::ChargeLattice::new(2, vec![0, 1, -1, 0])
                .map_err(numerical)?,
            generators: vec![
                hktwist::lattice::GeneratorData {
                    z: Complex64::new(0.0, 1.0),
                    theta: 0.0,
                    omega: 1,
                    sigma: -1,
                },
                hktwist::lattice::GeneratorData {
                    z: Complex64::new(1.0, 0.0),
                    theta: 0.0,
                    omega: 0,
                    sigma: -1,
                },
            ],
            extra_support: vec![],
        };
        let sol = tba_solve(&spectrum, 1.0, &TbaOpts::default()).map_err(numerical)?;
        ctx.write("selftest_tba_rays.csv", &csv_ray_tables(&sol))?;
        let gm = Charge::unit(2, 1);
        let corr = sol
            .log_correction(&gm, Complex64::new(-1.0, 0.0), None)
            .map_err(numerical)?;
        let bound = sol.correction_bound(&gm, Complex64::new(-1.0, 0.0));
        let ok = sol.iterations <= 2 && corr.norm() <= bound;
        record(
            "tba",
            ok,
            format!("correction {:.3e} <= bound {:.3e}", corr.norm(), bound),
        );
    }

    // semiflat metric agreement
    {
        let (patch, point) = hktwist::metric::semiflat_patch(2.0);
        let opts = VarpiOpts::default();
        let twist = extract_metric(&patch, &point, &opts).map_err(numerical)?;
        let sf = semiflat_metric(&patch, &point, opts.h).map_err(numerical)?;
        let rel = twist.g.sub(&sf.g).frobenius() / sf.g.frobenius();
        let ok = rel < 1e-5 && twist.eigenvalues.iter().all(|&e| e > 0.0);
        record("metric", ok, format!("semiflat agreement {rel:.3e}"));
    }

    // canonical coordinate with a seeded error model
    {
        let error = hktwist::sections::ErrorModel {
            amplitude: 1.0,
            mu: 1.0,
            delta: 0.5,
            profile: hktwist::sections::ErrorProfile::Seeded { seed },
        };
        let model = presets::model(6.0, Complex64::from_polar(0.9, presets::THETA), error, -0.05);
        let quad = build_quadrilateral(
            &model.q,
            presets::THETA,
            presets::quadrilateral_seeds(),
            &QuadOptions::default(),
        )
        .map_err(numerical)?;
        let x = x_coordinate(&model, &quad).map_err(numerical)?;
        let want = model.expected_r_q(1);
        let ok = (x.r_q - want).norm() < 1e-4 + 0.02 * want.norm();
        ctx.write_json(
            "selftest_xcoord.json",
            &json!({
                "seed": seed,
                "value": [x.value.re, x.value.im],
                "r_q": [x.r_q.re, x.r_q.im],
                "expected_r_q": [want.re, want.im],
            }),
        )?;
        record("xcoord", ok, format!("|r_q| = {:.3e}", x.r_q.norm()));
    }

    let all_ok = summary.iter().all(|(_, ok, _)| *ok);
    let mut report = String::new();
    for (name, ok, detail) in &summary {
        let _ = writeln!(report, "{name},{},{detail}", if *ok { "ok" } else { "fail" });
    }
    ctx.write("selftest_summary.csv", &report)?;
    ctx.write_json(
        "selftest.json",
        &json!({
            "seed": seed,
            "passes": summary.iter().map(|(n, ok, _)| json!({"name": n, "ok": ok})).collect::<Vec<_>>(),
            "all_ok": all_ok,
        }),
    )?;
    println!(
        "selftest: {}/{} checks passed (seed {seed})",
        summary.iter().filter(|(_, ok, _)| *ok).count(),
        summary.len()
    );
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Numerical("selftest failed".into()))
    }
}

// small helper re-used by summaries
#[allow(dead_code)]
fn fmt_c(z: Complex64) -> String {
    format!("{}{}{}i", fmt_f64(z.re), if z.im >= 0.0 { "+" } else { "-" }, fmt_f64(z.im.abs()))
}
