//! CSV, JSON and SVG artifact writers. All numeric CSV fields use 17
//! significant digits so doubles round-trip exactly, and every writer is
//! deterministic for a fixed input.

use crate::lattice::TbaSolution;
use crate::metric::DecaySweep;
use crate::quaddiff::Trajectory;
use crate::volterra::GridSolution;
use crate::C;
use std::fmt::Write as _;

/// 17-significant-digit formatting (round-trip exact for f64).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn csv_trajectory(traj: &Trajectory) -> String {
    let mut out = String::from("t,re_z,im_z\n");
    for &(t, z) in &traj.samples {
        let _ = writeln!(out, "{},{},{}", fmt_f64(t), fmt_f64(z.re), fmt_f64(z.im));
    }
    out
}

pub fn csv_grid_solution(sol: &GridSolution) -> String {
    let dim = sol.values.first().map_or(0, |v| v.len());
    let mut header = String::from("t");
    for d in 0..dim {
        let _ = write!(header, ",re_x{d},im_x{d}");
    }
    let mut out = header + "\n";
    for (k, &t) in sol.grid.iter().enumerate() {
        let mut line = fmt_f64(t);
        for d in 0..dim {
            let _ = write!(
                line,
                ",{},{}",
                fmt_f64(sol.values[k][d].re),
                fmt_f64(sol.values[k][d].im)
            );
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Converged ray tables: columns ray id, y, Re log, Im log.
pub fn csv_ray_tables(solution: &TbaSolution) -> String {
    let mut out = String::from("ray,y,re_log,im_log\n");
    for (id, ray) in solution.rays.iter().enumerate() {
        for (k, &y) in ray.y_nodes.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                id,
                fmt_f64(y),
                fmt_f64(ray.log_vals[k].re),
                fmt_f64(ray.log_vals[k].im)
            );
        }
    }
    out
}

/// Decay sweep: columns R, diff norm, bound.
pub fn csv_decay_sweep(sweep: &DecaySweep) -> String {
    let mut out = String::from("r,diff_norm,bound\n");
    for s in &sweep.samples {
        let _ = writeln!(
            out,
            "{},{},{}",
            fmt_f64(s.r),
            fmt_f64(s.diff_norm),
            fmt_f64(s.envelope)
        );
    }
    out
}

/// Marker styles for the plane pictures.
pub struct SvgStyle {
    pub width: f64,
    pub height: f64,
    pub margin: f64,
    pub stroke: String,
}

impl Default for SvgStyle {
    fn default() -> Self {
        SvgStyle {
            width: 640.0,
            height: 640.0,
            margin: 24.0,
            stroke: "#1f77b4".into(),
        }
    }
}

/// Scene description for [`export_svg`].
pub struct SvgScene<'a> {
    pub trajectories: Vec<&'a Trajectory>,
    pub zeros: Vec<C>,
    pub poles: Vec<C>,
    /// Labeled BPS rays from the origin in the zeta plane: (angle, label).
    pub rays: Vec<(f64, String)>,
}

impl<'a> SvgScene<'a> {
    pub fn empty() -> SvgScene<'a> {
        SvgScene {
            trajectories: vec![],
            zeros: vec![],
            poles: vec![],
            rays: vec![],
        }
    }
}

fn fmt_coord(x: f64) -> String {
    format!("{x:.6}")
}

/// Deterministic SVG: trajectories as polylines, zeros as cross markers,
/// poles as circles, BPS rays as labeled rays from the origin.
pub fn export_svg(scene: &SvgScene, style: &SvgStyle) -> String {
    // bounding box over all geometry, with a sane default window
    let mut lo = (-1.0f64, -1.0f64);
    let mut hi = (1.0f64, 1.0f64);
    let mut grow = |z: C| {
        lo.0 = lo.0.min(z.re);
        lo.1 = lo.1.min(z.im);
        hi.0 = hi.0.max(z.re);
        hi.1 = hi.1.max(z.im);
    };
    for t in &scene.trajectories {
        for &(_, z) in &t.samples {
            grow(z);
        }
    }
    for &z in scene.zeros.iter().chain(&scene.poles) {
        grow(z);
    }
    let span = ((hi.0 - lo.0).max(hi.1 - lo.1)).max(1e-9);
    let scale = (style.width - 2.0 * style.margin) / span;
    let map = |z: C| -> (f64, f64) {
        (
            style.margin + (z.re - lo.0) * scale,
            style.height - style.margin - (z.im - lo.1) * scale,
        )
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">",
        fmt_coord(style.width),
        fmt_coord(style.height),
        fmt_coord(style.width),
        fmt_coord(style.height)
    );
    let _ = writeln!(out, "  <g fill=\"none\" stroke=\"{}\">", style.stroke);
    for t in &scene.trajectories {
        // subsample long trajectories so files stay inspectable
        let step = (t.samples.len() / 2000).max(1);
        let mut pts = String::new();
        for (k, &(_, z)) in t.samples.iter().enumerate() {
            if k % step != 0 && k != t.samples.len() - 1 {
                continue;
            }
            let (x, y) = map(z);
            let _ = write!(pts, "{},{} ", fmt_coord(x), fmt_coord(y));
        }
        let _ = writeln!(out, "    <polyline points=\"{}\"/>", pts.trim_end());
    }
    let _ = writeln!(out, "  </g>");
    // zeros: crosses
    let _ = writeln!(out, "  <g stroke=\"#d62728\" stroke-width=\"1.5\">");
    for &z in &scene.zeros {
        let (x, y) = map(z);
        let r = 5.0;
        let _ = writeln!(
            out,
            "    <path d=\"M {} {} L {} {} M {} {} L {} {}\"/>",
            fmt_coord(x - r),
            fmt_coord(y - r),
            fmt_coord(x + r),
            fmt_coord(y + r),
            fmt_coord(x - r),
            fmt_coord(y + r),
            fmt_coord(x + r),
            fmt_coord(y - r)
        );
    }
    let _ = writeln!(out, "  </g>");
    // poles: circles
    let _ = writeln!(
        out,
        "  <g fill=\"none\" stroke=\"#2ca02c\" stroke-width=\"1.5\">"
    );
    for &p in &scene.poles {
        let (x, y) = map(p);
        let _ = writeln!(
            out,
            "    <circle cx=\"{}\" cy=\"{}\" r=\"5\"/>",
            fmt_coord(x),
            fmt_coord(y)
        );
    }
    let _ = writeln!(out, "  </g>");
    // BPS rays from the origin of the window center
    if !scene.rays.is_empty() {
        let cx = style.width / 2.0;
        let cy = style.height / 2.0;
        let len = style.width / 2.0 - style.margin;
        let _ = writeln!(out, "  <g stroke=\"#9467bd\" fill=\"#9467bd\">");
        for (angle, label) in &scene.rays {
            let ex = cx + len * angle.cos();
            let ey = cy - len * angle.sin();
            let _ = writeln!(
                out,
                "    <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/>",
                fmt_coord(cx),
                fmt_coord(cy),
                fmt_coord(ex),
                fmt_coord(ey)
            );
            let _ = writeln!(
                out,
                "    <text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>",
                fmt_coord(cx + 0.9 * len * angle.cos()),
                fmt_coord(cy - 0.9 * len * angle.sin()),
                label
            );
        }
        let _ = writeln!(out, "  </g>");
    }
    let _ = writeln!(out, "</svg>");
    out
}
