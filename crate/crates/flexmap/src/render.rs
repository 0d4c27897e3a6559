//! SVG heatmaps of unit regulation and boundary overlays.
//!
//! Regulation uses a diverging scale: red for consumption (positive
//! regulation), blue for production, white at zero. Infeasible and
//! not-converged cells get their own flat colours. The initial operating
//! point (zero request) is marked with a cross.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use flexmap_core::flexopf::SolveStatus;
use flexmap_core::net::PerUnitBase;
use flexmap_core::sweep::{extract_boundary, Boundary, Channel, SweepResult};

use crate::io::DataError;

const LEFT: f64 = 72.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;
const MIN_PLOT_H: f64 = 220.0;
const TARGET_PLOT_PX: u32 = 480;

const RED: (f64, f64, f64) = (178.0, 24.0, 43.0);
const BLUE: (f64, f64, f64) = (33.0, 102.0, 172.0);
const INFEASIBLE_FILL: &str = "#d9d9d9";
const NOT_CONVERGED_FILL: &str = "#f0e442";
const FEASIBLE_FILL: &str = "#c6dbef";

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RenderOptions {
    /// Colour-scale limit, kW or kVAr; default is the largest regulation
    /// magnitude over all layers.
    pub scale_kw: Option<f64>,
    /// Pixel size of one grid cell; default fits the plot to about 480 px.
    pub cell_px: Option<u32>,
}

/// A sweep to draw, with an optional swap-free sweep on the same grid whose
/// boundary is overlaid dashed.
pub struct Figure<'a> {
    pub sweep: &'a SweepResult,
    pub unit_names: &'a [String],
    pub base: PerUnitBase,
    pub swap_free: Option<&'a SweepResult>,
}

/// Largest regulation magnitude over every unit, channel and optimal cell, p.u.
pub fn shared_scale(sweep: &SweepResult) -> f64 {
    let mut m = 0.0f64;
    for c in sweep.cells.iter().filter(|c| c.is_optimal()) {
        for u in 0..c.dispatch.units.len() {
            for ch in [Channel::P, Channel::Q] {
                m = m.max(c.regulation(u, ch).abs());
            }
        }
    }
    m
}

/// RGB of a normalised value in `[-1, 1]`.
pub fn diverging_colour(t: f64) -> (u8, u8, u8) {
    let t = if t.is_finite() {
        t.clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let end = if t >= 0.0 { RED } else { BLUE };
    let a = t.abs();
    let mix = |c: f64| (255.0 + (c - 255.0) * a).round() as u8;
    (mix(end.0), mix(end.1), mix(end.2))
}

fn hex((r, g, b): (u8, u8, u8)) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// File-name-safe form of a unit name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn nice_step(span: f64) -> f64 {
    if span.is_nan() || span <= 0.0 {
        return 1.0;
    }
    let raw = span / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let n = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    n * mag
}

fn fmt_tick(v: f64) -> String {
    let v = if v.abs() < 1e-9 { 0.0 } else { v };
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

struct Frame {
    dp_min: f64,
    dq_min: f64,
    step: f64,
    nx: usize,
    ny: usize,
    cell: f64,
    base: PerUnitBase,
}

impl Frame {
    fn new(sweep: &SweepResult, base: PerUnitBase, cell_px: Option<u32>) -> Self {
        let (nx, ny) = sweep.spec.counts();
        let cell = cell_px
            .unwrap_or_else(|| (TARGET_PLOT_PX / nx.max(ny) as u32).max(1))
            .max(1);
        Self {
            dp_min: sweep.spec.dp_min,
            dq_min: sweep.spec.dq_min,
            step: sweep.spec.step,
            nx,
            ny,
            cell: cell as f64,
            base,
        }
    }

    fn plot_w(&self) -> f64 {
        self.nx as f64 * self.cell
    }

    fn plot_h(&self) -> f64 {
        self.ny as f64 * self.cell
    }

    fn width(&self) -> f64 {
        LEFT + self.plot_w() + RIGHT
    }

    fn height(&self) -> f64 {
        TOP + self.plot_h().max(MIN_PLOT_H) + BOTTOM
    }

    /// Pixel position of a request point, p.u.
    fn px(&self, dp: f64, dq: f64) -> (f64, f64) {
        let x = LEFT + ((dp - self.dp_min) / self.step + 0.5) * self.cell;
        let y = TOP + self.plot_h() - ((dq - self.dq_min) / self.step + 0.5) * self.cell;
        (x, y)
    }

    fn open(&self, out: &mut String, title: &str) {
        let (w, h) = (self.width(), self.height());
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            out,
            r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
            LEFT + self.plot_w() / 2.0,
            escape(title)
        );
    }

    /// Cell fills, merging horizontal runs of equal colour.
    fn cells(&self, out: &mut String, fill: impl Fn(usize, usize) -> String) {
        let _ = writeln!(out, r#"<g shape-rendering="crispEdges">"#);
        for j in 0..self.ny {
            let y = TOP + (self.ny - 1 - j) as f64 * self.cell;
            let mut i = 0;
            while i < self.nx {
                let f = fill(i, j);
                let mut e = i + 1;
                while e < self.nx && fill(e, j) == f {
                    e += 1;
                }
                if f != "white" {
                    let _ = writeln!(
                        out,
                        r#"<rect x="{:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{f}"/>"#,
                        LEFT + i as f64 * self.cell,
                        (e - i) as f64 * self.cell,
                        self.cell
                    );
                }
                i = e;
            }
        }
        let _ = writeln!(out, "</g>");
    }

    fn axes(&self, out: &mut String) {
        let (w, h) = (self.plot_w(), self.plot_h());
        let _ = writeln!(
            out,
            r#"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="black" stroke-width="0.8"/>"#
        );
        let half = 0.5 * self.step;
        let kw = |pu: f64| self.base.pu_to_kw(pu);
        let (x_lo, x_hi) = (
            kw(self.dp_min - half),
            kw(self.dp_min + (self.nx as f64 - 0.5) * self.step),
        );
        let (y_lo, y_hi) = (
            kw(self.dq_min - half),
            kw(self.dq_min + (self.ny as f64 - 0.5) * self.step),
        );
        let bottom = TOP + h;
        let sx = nice_step(x_hi - x_lo);
        let mut t = (x_lo / sx).ceil() * sx;
        while t <= x_hi + 1e-9 * sx {
            let (x, _) = self.px(self.base.kw_to_pu(t), self.dq_min);
            let _ = writeln!(
                out,
                r#"<line x1="{x:.1}" y1="{bottom:.1}" x2="{x:.1}" y2="{:.1}" stroke="black" stroke-width="0.8"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                bottom + 4.0,
                bottom + 16.0,
                fmt_tick(t)
            );
            t += sx;
        }
        let sy = nice_step(y_hi - y_lo);
        let mut t = (y_lo / sy).ceil() * sy;
        while t <= y_hi + 1e-9 * sy {
            let (_, y) = self.px(self.dp_min, self.base.kw_to_pu(t));
            let _ = writeln!(
                out,
                r#"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT:.1}" y2="{y:.1}" stroke="black" stroke-width="0.8"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                LEFT - 4.0,
                LEFT - 6.0,
                y + 4.0,
                fmt_tick(t)
            );
            t += sy;
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">interface ΔP request (kW)</text>"#,
            LEFT + w / 2.0,
            bottom + 36.0
        );
        let _ = writeln!(
            out,
            r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">interface ΔQ request (kVAr)</text>"#,
            TOP + h / 2.0
        );
    }

    fn boundary(&self, out: &mut String, b: &Boundary, dashed: bool) {
        if b.loops.is_empty() {
            return;
        }
        let mut d = String::new();
        for l in &b.loops {
            for (n, &(dp, dq)) in l.iter().enumerate() {
                let (x, y) = self.px(dp, dq);
                let _ = write!(d, "{}{x:.1} {y:.1} ", if n == 0 { "M" } else { "L" });
            }
            d.push_str("Z ");
        }
        let dash = if dashed {
            r#" stroke-dasharray="5 3""#
        } else {
            ""
        };
        let _ = writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="black" stroke-width="1.4"{dash}/>"#,
            d.trim_end()
        );
    }

    fn origin_cross(&self, out: &mut String) {
        let (x, y) = self.px(0.0, 0.0);
        let inside = x >= LEFT && x <= LEFT + self.plot_w() && y >= TOP && y <= TOP + self.plot_h();
        if inside {
            let r = 6.0;
            let _ = writeln!(
                out,
                r#"<path d="M{:.1} {:.1} L{:.1} {:.1} M{:.1} {:.1} L{:.1} {:.1}" stroke="black" stroke-width="2"/>"#,
                x - r,
                y - r,
                x + r,
                y + r,
                x - r,
                y + r,
                x + r,
                y - r
            );
        }
    }

    fn legend_x(&self) -> f64 {
        LEFT + self.plot_w() + 24.0
    }

    fn status_legend(&self, out: &mut String, y0: f64, with_swap_free: bool) {
        let x = self.legend_x();
        let mut y = y0;
        for (fill, label) in [
            (INFEASIBLE_FILL, "infeasible"),
            (NOT_CONVERGED_FILL, "not converged"),
        ] {
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{y:.1}" width="12" height="12" fill="{fill}" stroke="black" stroke-width="0.5"/><text x="{:.1}" y="{:.1}">{label}</text>"#,
                x + 18.0,
                y + 10.0
            );
            y += 18.0;
        }
        let mut lines = vec![("", "feasible boundary")];
        if with_swap_free {
            lines.push((r#" stroke-dasharray="5 3""#, "without swaps"));
        }
        for (dash, label) in lines {
            let _ = writeln!(
                out,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="1.4"{dash}/><text x="{:.1}" y="{:.1}">{label}</text>"#,
                y + 6.0,
                x + 14.0,
                y + 6.0,
                x + 18.0,
                y + 10.0
            );
            y += 18.0;
        }
    }
}

fn cell_status_fill(status: SolveStatus) -> Option<&'static str> {
    match status {
        SolveStatus::Optimal => None,
        SolveStatus::Infeasible => Some(INFEASIBLE_FILL),
        SolveStatus::NotConverged => Some(NOT_CONVERGED_FILL),
    }
}

/// Heatmap of one unit's regulation in one channel. `scale` is the colour
/// limit in p.u.
pub fn heatmap_svg(
    fig: &Figure<'_>,
    unit: usize,
    channel: Channel,
    scale: f64,
    cell_px: Option<u32>,
) -> String {
    let frame = Frame::new(fig.sweep, fig.base, cell_px);
    let scale = if scale > 0.0 && scale.is_finite() {
        scale
    } else {
        fig.base.kw_to_pu(1.0)
    };
    let name = fig.unit_names.get(unit).map_or("?", String::as_str);
    let (what, unit_label) = match channel {
        Channel::P => ("active", "kW"),
        Channel::Q => ("reactive", "kVAr"),
    };
    let mut out = String::new();
    frame.open(
        &mut out,
        &format!("Unit {name}: {what} power regulation ({unit_label})"),
    );
    let sweep = fig.sweep;
    frame.cells(&mut out, |i, j| {
        let c = sweep.cell(i, j);
        match cell_status_fill(c.status) {
            Some(f) => f.to_string(),
            None => {
                let col = diverging_colour(c.regulation(unit, channel) / scale);
                if col == (255, 255, 255) {
                    "white".into()
                } else {
                    hex(col)
                }
            }
        }
    });
    frame.boundary(&mut out, &extract_boundary(sweep), false);
    if let Some(sf) = fig.swap_free {
        frame.boundary(&mut out, &extract_boundary(sf), true);
    }
    frame.origin_cross(&mut out);
    frame.axes(&mut out);
    // Colour bar, consumption on top.
    let (x, h) = (frame.legend_x(), 140.0);
    let _ = writeln!(
        out,
        r##"<defs><linearGradient id="bar" x1="0" y1="0" x2="0" y2="1"><stop offset="0" stop-color="{}"/><stop offset="0.5" stop-color="#ffffff"/><stop offset="1" stop-color="{}"/></linearGradient></defs>"##,
        hex(diverging_colour(1.0)),
        hex(diverging_colour(-1.0))
    );
    let _ = writeln!(
        out,
        r#"<rect x="{x:.1}" y="{TOP:.1}" width="14" height="{h:.1}" fill="url(#bar)" stroke="black" stroke-width="0.5"/>"#
    );
    let s_kw = fig.base.pu_to_kw(scale);
    for (dy, label) in [
        (0.0, format!("+{} consumption", fmt_tick(s_kw))),
        (h / 2.0, "0".to_string()),
        (h, format!("−{} production", fmt_tick(s_kw))),
    ] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}">{label}</text>"#,
            x + 18.0,
            TOP + dy + 4.0
        );
    }
    frame.status_legend(&mut out, TOP + h + 16.0, fig.swap_free.is_some());
    out.push_str("</svg>\n");
    out
}

/// Feasibility map with the boundary of the sweep (solid) and of the
/// swap-free sweep (dashed).
pub fn boundary_svg(fig: &Figure<'_>, cell_px: Option<u32>) -> String {
    let frame = Frame::new(fig.sweep, fig.base, cell_px);
    let mut out = String::new();
    frame.open(&mut out, "Flexibility area");
    let sweep = fig.sweep;
    frame.cells(&mut out, |i, j| {
        let c = sweep.cell(i, j);
        cell_status_fill(c.status)
            .unwrap_or(FEASIBLE_FILL)
            .to_string()
    });
    frame.boundary(&mut out, &extract_boundary(sweep), false);
    if let Some(sf) = fig.swap_free {
        frame.boundary(&mut out, &extract_boundary(sf), true);
    }
    frame.origin_cross(&mut out);
    frame.axes(&mut out);
    let x = frame.legend_x();
    let _ = writeln!(
        out,
        r#"<rect x="{x:.1}" y="{TOP:.1}" width="12" height="12" fill="{FEASIBLE_FILL}" stroke="black" stroke-width="0.5"/><text x="{:.1}" y="{:.1}">optimal</text>"#,
        x + 18.0,
        TOP + 10.0
    );
    frame.status_legend(&mut out, TOP + 18.0, fig.swap_free.is_some());
    out.push_str("</svg>\n");
    out
}

/// Writes `heatmap_<unit>_<p|q>.svg` for every unit and channel plus
/// `boundary.svg`; returns the written paths.
pub fn render_files(
    fig: &Figure<'_>,
    opts: &RenderOptions,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, DataError> {
    let scale = match opts.scale_kw {
        Some(kw) => fig.base.kw_to_pu(kw),
        None => shared_scale(fig.sweep),
    };
    let mut files = Vec::new();
    let mut write = |name: String, text: String| -> Result<(), DataError> {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        files.push(path);
        Ok(())
    };
    for (u, name) in fig.unit_names.iter().enumerate() {
        for ch in [Channel::P, Channel::Q] {
            let svg = heatmap_svg(fig, u, ch, scale, opts.cell_px);
            write(
                format!("heatmap_{}_{}.svg", file_stem(name), ch.as_str()),
                svg,
            )?;
        }
    }
    write("boundary.svg".into(), boundary_svg(fig, opts.cell_px))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colour_scale_is_symmetric() {
        assert_eq!(diverging_colour(0.0), (255, 255, 255));
        assert_eq!(diverging_colour(1.0), (178, 24, 43));
        assert_eq!(diverging_colour(-1.0), (33, 102, 172));
        assert_eq!(diverging_colour(7.0), diverging_colour(1.0));
        let (r, g, b) = diverging_colour(0.5);
        assert!(r > g && r > b);
        let (r, g, b) = diverging_colour(-0.5);
        assert!(b > r && b > g);
    }

    #[test]
    fn tick_steps() {
        assert_eq!(nice_step(4000.0), 1000.0);
        assert_eq!(nice_step(600.0), 100.0);
        assert_eq!(nice_step(9.0), 2.0);
        assert_eq!(fmt_tick(-0.0), "0");
        assert_eq!(fmt_tick(-1500.0), "-1500");
    }

    #[test]
    fn stems_are_file_safe() {
        assert_eq!(file_stem("A"), "A");
        assert_eq!(file_stem("pv/1 x"), "pv_1_x");
    }
}
