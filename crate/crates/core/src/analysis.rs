//! Geometry and dispatch diagnostics over a finished sweep.

use alloc::vec::Vec;

use crate::sweep::{Channel, SweepResult};

/// Cell indices `(i, j)` on the sweep grid.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct SwapCell {
    pub cell: Cell,
    pub channel: Channel,
    /// Units regulating below `-threshold` (production).
    pub producing: Vec<usize>,
    /// Units regulating above `threshold` (consumption).
    pub consuming: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftHotspot {
    pub from: Cell,
    pub to: Cell,
    pub unit: usize,
    pub channel: Channel,
    /// Change of the unit's setpoint between the two cells, p.u. (`to − from`).
    pub jump: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AreaReport {
    /// Optimal-cell count × cell area, p.u.².
    pub feasible_area: f64,
    /// Count of cells whose centre lies in the hull × cell area, p.u.².
    pub hull_area: f64,
    pub nonconvexity_gap: f64,
    /// Counter-clockwise hull of the optimal-cell centres, p.u.
    pub hull: Vec<(f64, f64)>,
    pub hull_infeasible_cells: Vec<Cell>,
    pub swap_cells: Vec<SwapCell>,
    pub shift_hotspots: Vec<ShiftHotspot>,
}

fn cross<T>(o: (T, T), a: (T, T), b: (T, T)) -> T
where
    T: Copy + core::ops::Sub<Output = T> + core::ops::Mul<Output = T>,
{
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain. Returns the hull counter-clockwise without
/// collinear vertices; degenerate inputs give the distinct extreme points
/// (one point or a segment).
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    monotone_chain(pts, |o, a, b| cross(o, a, b) > 0.0)
}

/// Exact hull of integer lattice points.
pub fn convex_hull_lattice(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    monotone_chain(pts, |o, a, b| cross(o, a, b) > 0)
}

fn monotone_chain<P: Copy>(pts: Vec<P>, left_turn: impl Fn(P, P, P) -> bool) -> Vec<P> {
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<P> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && !left_turn(hull[hull.len() - 2], hull[hull.len() - 1], p) {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && !left_turn(hull[hull.len() - 2], hull[hull.len() - 1], p) {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Whether `p` lies inside or on the boundary of a counter-clockwise convex
/// polygon (or on a degenerate segment/point hull). `eps` absorbs rounding.
pub fn in_convex_polygon(poly: &[(f64, f64)], p: (f64, f64), eps: f64) -> bool {
    match poly.len() {
        0 => false,
        1 => (poly[0].0 - p.0).abs() <= eps && (poly[0].1 - p.1).abs() <= eps,
        2 => on_segment(poly[0], poly[1], p, eps),
        n => (0..n).all(|k| cross(poly[k], poly[(k + 1) % n], p) >= -eps),
    }
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64), eps: f64) -> bool {
    let len = libm::hypot(b.0 - a.0, b.1 - a.1);
    if cross(a, b, p).abs() > eps * len.max(1.0) {
        return false;
    }
    let t = (p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1);
    t >= -eps && t <= len * len + eps
}

fn in_lattice_hull(poly: &[(i64, i64)], p: (i64, i64)) -> bool {
    match poly.len() {
        0 => false,
        1 => poly[0] == p,
        2 => {
            let (a, b) = (poly[0], poly[1]);
            cross(a, b, p) == 0
                && p.0 >= a.0.min(b.0)
                && p.0 <= a.0.max(b.0)
                && p.1 >= a.1.min(b.1)
                && p.1 <= a.1.max(b.1)
        }
        n => (0..n).all(|k| cross(poly[k], poly[(k + 1) % n], p) >= 0),
    }
}

pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    crate::sweep::signed_area(poly).abs()
}

/// Hull of the optimal cells and the infeasible cells inside it. Areas are
/// cell counts times the cell area; the hull is computed exactly on cell
/// indices.
pub fn nonconvexity_report(sweep: &SweepResult) -> AreaReport {
    let spec = &sweep.spec;
    let cell_area = spec.step * spec.step;
    let optimal: Vec<(i64, i64)> = (0..sweep.cells.len())
        .filter(|&k| sweep.cells[k].is_optimal())
        .map(|k| {
            let (i, j) = spec.cell(k);
            (i as i64, j as i64)
        })
        .collect();
    let hull = convex_hull_lattice(&optimal);
    let mut inside = 0usize;
    let mut holes = Vec::new();
    if !hull.is_empty() {
        let (i_lo, i_hi) = hull
            .iter()
            .fold((i64::MAX, i64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (j_lo, j_hi) = hull
            .iter()
            .fold((i64::MAX, i64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        for j in j_lo..=j_hi {
            for i in i_lo..=i_hi {
                if in_lattice_hull(&hull, (i, j)) {
                    inside += 1;
                    if !sweep.cell(i as usize, j as usize).is_optimal() {
                        holes.push((i as usize, j as usize));
                    }
                }
            }
        }
    }
    let feasible_area = optimal.len() as f64 * cell_area;
    let hull_area = inside as f64 * cell_area;
    let nonconvexity_gap = if inside == 0 {
        0.0
    } else {
        holes.len() as f64 / inside as f64
    };
    AreaReport {
        feasible_area,
        hull_area,
        nonconvexity_gap,
        hull: hull
            .iter()
            .map(|&(i, j)| {
                let r = spec.request(i as usize, j as usize);
                (r.dp, r.dq)
            })
            .collect(),
        hull_infeasible_cells: holes,
        swap_cells: Vec::new(),
        shift_hotspots: Vec::new(),
    }
}

/// Optimal cells where, within one channel, some unit regulates above
/// `threshold` while another regulates below `-threshold`.
pub fn detect_swaps(sweep: &SweepResult, threshold: f64) -> Vec<SwapCell> {
    let units = sweep.unit_count();
    let mut out = Vec::new();
    for (k, c) in sweep.cells.iter().enumerate() {
        if !c.is_optimal() {
            continue;
        }
        for channel in [Channel::P, Channel::Q] {
            let producing: Vec<usize> = (0..units)
                .filter(|&u| c.regulation(u, channel) < -threshold)
                .collect();
            let consuming: Vec<usize> = (0..units)
                .filter(|&u| c.regulation(u, channel) > threshold)
                .collect();
            if !producing.is_empty() && !consuming.is_empty() {
                out.push(SwapCell {
                    cell: sweep.spec.cell(k),
                    channel,
                    producing,
                    consuming,
                });
            }
        }
    }
    out
}

/// Pairs of side-adjacent optimal cells where a unit's setpoint changes by
/// more than `jump_threshold`, largest jumps first.
pub fn detect_shifts(sweep: &SweepResult, jump_threshold: f64) -> Vec<ShiftHotspot> {
    let (nx, ny) = sweep.spec.counts();
    let units = sweep.unit_count();
    let mut out = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let a = sweep.cell(i, j);
            if !a.is_optimal() {
                continue;
            }
            for (ni, nj) in [(i + 1, j), (i, j + 1)] {
                if ni >= nx || nj >= ny {
                    continue;
                }
                let b = sweep.cell(ni, nj);
                if !b.is_optimal() {
                    continue;
                }
                for u in 0..units {
                    for channel in [Channel::P, Channel::Q] {
                        let jump = b.regulation(u, channel) - a.regulation(u, channel);
                        if jump.abs() > jump_threshold {
                            out.push(ShiftHotspot {
                                from: (i, j),
                                to: (ni, nj),
                                unit: u,
                                channel,
                                jump,
                            });
                        }
                    }
                }
            }
        }
    }
    out.sort_by(|x, y| {
        y.jump
            .abs()
            .total_cmp(&x.jump.abs())
            .then(x.from.1.cmp(&y.from.1))
            .then(x.from.0.cmp(&y.from.0))
            .then(x.to.cmp(&y.to))
            .then(x.unit.cmp(&y.unit))
            .then(x.channel.cmp(&y.channel))
    });
    out
}

/// Full report: hull and gap plus swaps and shifts.
pub fn analyze(sweep: &SweepResult, swap_threshold: f64, jump_threshold: f64) -> AreaReport {
    let mut r = nonconvexity_report(sweep);
    r.swap_cells = detect_swaps(sweep, swap_threshold);
    r.shift_hotspots = detect_shifts(sweep, jump_threshold);
    r
}
