//! Grid sweeps of the interface request plane.
//!
//! Every cell is solved on its own from the solver's standard starts, so the
//! result does not depend on the order (or the number of workers) in which
//! cells are processed. Parallel drivers only need [`solve_cell`].

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::flexopf::{
    Dispatch, FlexError, FlexProblem, FlexRequest, FlexSolveResult, SolveStatus, SolverOptions,
};
use crate::net::{BusId, FlexUnit, RadialNetwork};

/// Relative slack when counting grid steps, so that ranges that are whole
/// multiples of the step in decimal are not cut short by rounding.
const STEP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GridError {
    #[error("grid step must be positive and finite")]
    Step,
    #[error("grid range must be finite with min <= max")]
    Range,
    #[error("grid would have too many cells")]
    TooLarge,
}

/// Request grid, p.u. Cell `(i, j)` is the request
/// `(dp_min + i·step, dq_min + j·step)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dp_min: f64,
    pub dp_max: f64,
    pub dq_min: f64,
    pub dq_max: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn new(
        dp_min: f64,
        dp_max: f64,
        dq_min: f64,
        dq_max: f64,
        step: f64,
    ) -> Result<Self, GridError> {
        let spec = Self {
            dp_min,
            dp_max,
            dq_min,
            dq_max,
            step,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Symmetric grid spanning the aggregate regulation capability of the
    /// units, widened by `pad_steps` steps on every side.
    pub fn around_capability(
        units: &[FlexUnit],
        step: f64,
        pad_steps: usize,
    ) -> Result<Self, GridError> {
        let (mut p_lo, mut p_hi, mut q_lo, mut q_hi) = (0.0, 0.0, 0.0, 0.0);
        for u in units {
            p_lo += u.p_min - u.p0;
            p_hi += u.p_max - u.p0;
            q_lo += u.q_min - u.q0;
            q_hi += u.q_max - u.q0;
        }
        let pad = pad_steps as f64 * step;
        Self::new(p_lo - pad, p_hi + pad, q_lo - pad, q_hi + pad, step)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(GridError::Step);
        }
        let finite = [self.dp_min, self.dp_max, self.dq_min, self.dq_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.dp_min > self.dp_max || self.dq_min > self.dq_max {
            return Err(GridError::Range);
        }
        let (nx, ny) = (
            axis_count(self.dp_min, self.dp_max, self.step),
            axis_count(self.dq_min, self.dq_max, self.step),
        );
        if nx.checked_mul(ny).is_none_or(|n| n > 1 << 28) {
            return Err(GridError::TooLarge);
        }
        Ok(())
    }

    /// Cells along the P and Q axes, `floor(range / step) + 1` each.
    pub fn counts(&self) -> (usize, usize) {
        (
            axis_count(self.dp_min, self.dp_max, self.step),
            axis_count(self.dq_min, self.dq_max, self.step),
        )
    }

    pub fn len(&self) -> usize {
        let (nx, ny) = self.counts();
        nx * ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major index of cell `(i, j)` (P index fastest).
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.counts().0 + i
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        let nx = self.counts().0;
        (index % nx, index / nx)
    }

    pub fn request(&self, i: usize, j: usize) -> FlexRequest {
        FlexRequest {
            dp: self.dp_min + i as f64 * self.step,
            dq: self.dq_min + j as f64 * self.step,
        }
    }

    /// Cell whose request is nearest to `(dp, dq)`, if inside the grid.
    pub fn nearest_cell(&self, dp: f64, dq: f64) -> Option<(usize, usize)> {
        let (nx, ny) = self.counts();
        let i = libm::round((dp - self.dp_min) / self.step);
        let j = libm::round((dq - self.dq_min) / self.step);
        if i < 0.0 || j < 0.0 || i >= nx as f64 || j >= ny as f64 {
            return None;
        }
        Some((i as usize, j as usize))
    }
}

fn axis_count(lo: f64, hi: f64, step: f64) -> usize {
    let steps = (hi - lo) / step;
    libm::floor(steps * (1.0 + STEP_SLACK) + STEP_SLACK) as usize + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepMode {
    #[default]
    Full,
    /// Within each channel all units regulate in the same direction.
    SwapFree,
}

impl SweepMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepMode::Full => "full",
            SweepMode::SwapFree => "swap_free",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    P,
    Q,
}

impl Channel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::P => "p",
            Channel::Q => "q",
        }
    }
}

/// Lowest bus voltage of a solved cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinVoltage {
    pub bus: BusId,
    /// Magnitude, p.u.
    pub v: f64,
}

/// Per-cell outcome: a [`FlexSolveResult`] without the full network state.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub status: SolveStatus,
    pub dispatch: Dispatch,
    pub cost: f64,
    pub interface_error: f64,
    pub restarts_used: usize,
    pub vmin: Option<MinVoltage>,
}

impl SweepCell {
    pub fn from_result(net: &RadialNetwork, r: &FlexSolveResult) -> Self {
        let vmin = r.state.as_ref().map(|st| {
            let (pos, v) = st.min_voltage();
            MinVoltage {
                bus: net.buses()[pos].id,
                v: libm::sqrt(v),
            }
        });
        Self {
            status: r.status,
            dispatch: r.dispatch.clone(),
            cost: r.cost,
            interface_error: r.interface_error,
            restarts_used: r.restarts_used,
            vmin,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Signed regulation `p − p⁰` or `q − q⁰` of one unit.
    pub fn regulation(&self, unit: usize, channel: Channel) -> f64 {
        let d = &self.dispatch.units[unit];
        match channel {
            Channel::P => d.dp(),
            Channel::Q => d.dq(),
        }
    }
}

/// Provenance of a sweep. Hashes are hex digests of the input files (empty
/// when the inputs did not come from files); `timestamp` is Unix seconds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepMetadata {
    pub network_hash: String,
    pub units_hash: String,
    pub options: SolverOptions,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub spec: GridSpec,
    pub mode: SweepMode,
    /// Row-major, see [`GridSpec::index`].
    pub cells: Vec<SweepCell>,
    pub metadata: SweepMetadata,
}

impl SweepResult {
    pub fn cell(&self, i: usize, j: usize) -> &SweepCell {
        &self.cells[self.spec.index(i, j)]
    }

    pub fn unit_count(&self) -> usize {
        self.cells.first().map_or(0, |c| c.dispatch.units.len())
    }

    pub fn optimal_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_optimal()).count()
    }

    /// Optimality indicator per cell.
    pub fn feasibility_mask(&self) -> Vec<bool> {
        self.cells.iter().map(SweepCell::is_optimal).collect()
    }
}

/// Solves one grid cell.
pub fn solve_cell(
    prob: &FlexProblem<'_>,
    spec: &GridSpec,
    mode: SweepMode,
    i: usize,
    j: usize,
) -> SweepCell {
    let req = spec.request(i, j);
    let r = match mode {
        SweepMode::Full => prob.solve(req),
        SweepMode::SwapFree => prob.solve_swap_free(req, &[]),
    };
    SweepCell::from_result(prob.network(), &r)
}

/// Sequential sweep over every cell.
pub fn run_sweep(
    net: &RadialNetwork,
    units: &[FlexUnit],
    spec: GridSpec,
    opts: SolverOptions,
    mode: SweepMode,
) -> Result<SweepResult, SweepError> {
    spec.validate()?;
    let prob = FlexProblem::new(net, units, opts)?;
    let cells = (0..spec.len())
        .map(|k| {
            let (i, j) = spec.cell(k);
            solve_cell(&prob, &spec, mode, i, j)
        })
        .collect();
    Ok(SweepResult {
        spec,
        mode,
        cells,
        metadata: SweepMetadata {
            options: opts,
            ..SweepMetadata::default()
        },
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SweepError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Problem(#[from] FlexError),
}

/// Signed regulation of one unit and channel at every cell; `None` where the
/// cell is not optimal.
pub fn heatmap_layer(sweep: &SweepResult, unit: usize, channel: Channel) -> Vec<Option<f64>> {
    sweep
        .cells
        .iter()
        .map(|c| c.is_optimal().then(|| c.regulation(unit, channel)))
        .collect()
}

/// Closed boundary loops of the optimal-cell set, in request coordinates
/// (p.u.). Loops run counter-clockwise around optimal regions and clockwise
/// around holes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Boundary {
    pub loops: Vec<Vec<(f64, f64)>>,
    /// Set when there is nothing to separate.
    pub notice: Option<&'static str>,
}

impl Boundary {
    /// Net enclosed area (holes subtract), p.u.².
    pub fn area(&self) -> f64 {
        self.loops.iter().map(|l| signed_area(l)).sum()
    }
}

pub fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for k in 0..n {
        let (x0, y0) = poly[k];
        let (x1, y1) = poly[(k + 1) % n];
        a += x0 * y1 - x1 * y0;
    }
    0.5 * a
}

pub fn extract_boundary(sweep: &SweepResult) -> Boundary {
    let (nx, ny) = sweep.spec.counts();
    let mask = sweep.feasibility_mask();
    let mut b = boundary_of_mask(&mask, nx, ny);
    for l in &mut b.loops {
        for pt in l.iter_mut() {
            *pt = (
                sweep.spec.dp_min + pt.0 * sweep.spec.step,
                sweep.spec.dq_min + pt.1 * sweep.spec.step,
            );
        }
    }
    b
}

/// Edge between two doubled-coordinate lattice points.
type Segment = ((i64, i64), (i64, i64));

/// Marching squares over a row-major `nx × ny` indicator sampled at cell
/// centres. Output coordinates are in cell-index units. Diagonal-only
/// contacts are treated as separate regions.
pub fn boundary_of_mask(mask: &[bool], nx: usize, ny: usize) -> Boundary {
    let any = mask.iter().any(|&m| m);
    let all = mask.iter().all(|&m| m);
    if !any {
        return Boundary {
            loops: Vec::new(),
            notice: Some("no optimal cells"),
        };
    }
    if all {
        return Boundary {
            loops: Vec::new(),
            notice: Some("every cell is optimal"),
        };
    }
    // Padded lattice: index (i + 1, j + 1) holds mask (i, j); the ring is empty.
    let at = |i: i64, j: i64| -> bool {
        let (ci, cj) = (i - 1, j - 1);
        ci >= 0
            && cj >= 0
            && (ci as usize) < nx
            && (cj as usize) < ny
            && mask[cj as usize * nx + ci as usize]
    };
    // Edge midpoints in doubled coordinates of the padded lattice.
    let mut next: BTreeMap<(i64, i64), (i64, i64)> = BTreeMap::new();
    for j in 0..=ny as i64 {
        for i in 0..=nx as i64 {
            let case = at(i, j) as u8
                | (at(i + 1, j) as u8) << 1
                | (at(i + 1, j + 1) as u8) << 2
                | (at(i, j + 1) as u8) << 3;
            let bottom = (2 * i + 1, 2 * j);
            let right = (2 * i + 2, 2 * j + 1);
            let top = (2 * i + 1, 2 * j + 2);
            let left = (2 * i, 2 * j + 1);
            let segs: &[Segment] = match case {
                1 => &[(bottom, left)],
                2 => &[(right, bottom)],
                3 => &[(right, left)],
                4 => &[(top, right)],
                5 => &[(bottom, left), (top, right)],
                6 => &[(top, bottom)],
                7 => &[(top, left)],
                8 => &[(left, top)],
                9 => &[(bottom, top)],
                10 => &[(right, bottom), (left, top)],
                11 => &[(right, top)],
                12 => &[(left, right)],
                13 => &[(bottom, right)],
                14 => &[(left, bottom)],
                _ => &[],
            };
            for &(a, b) in segs {
                next.insert(a, b);
            }
        }
    }
    let mut loops = Vec::new();
    while let Some((&start, _)) = next.iter().next() {
        let mut pts = Vec::new();
        let mut cur = start;
        while let Some(n) = next.remove(&cur) {
            pts.push((cur.0 as f64 * 0.5 - 1.0, cur.1 as f64 * 0.5 - 1.0));
            cur = n;
        }
        loops.push(simplify_collinear(pts));
    }
    Boundary {
        loops,
        notice: None,
    }
}

/// Drops vertices lying on the straight line through their neighbours.
fn simplify_collinear(pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let n = pts.len();
    if n < 4 {
        return pts;
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let a = pts[(k + n - 1) % n];
        let b = pts[k];
        let c = pts[(k + 1) % n];
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross != 0.0 {
            out.push(b);
        }
    }
    out
}

/// Cells optimal on a grid of step `2s` whose counterpart on a grid of step
/// `s` (same lower corner) is not optimal. Returns `None` when the grids are
/// not nested that way.
pub fn refinement_losses(coarse: &SweepResult, fine: &SweepResult) -> Option<Vec<(usize, usize)>> {
    let (c, f) = (&coarse.spec, &fine.spec);
    let same_corner = (c.dp_min - f.dp_min).abs() <= 1e-9 * c.step
        && (c.dq_min - f.dq_min).abs() <= 1e-9 * c.step;
    if !same_corner || (c.step - 2.0 * f.step).abs() > 1e-9 * c.step {
        return None;
    }
    let (nx, ny) = c.counts();
    let (fx, fy) = f.counts();
    let mut lost = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if !coarse.cell(i, j).is_optimal() {
                continue;
            }
            let (fi, fj) = (2 * i, 2 * j);
            if fi >= fx || fj >= fy || !fine.cell(fi, fj).is_optimal() {
                lost.push((i, j));
            }
        }
    }
    Some(lost)
}
