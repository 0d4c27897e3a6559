//! Analysis outputs: `report.json`, `swaps.csv` and `shifts.csv`.

use std::path::Path;

use serde::Serialize;

use flexmap_core::analysis::{analyze, AreaReport, Cell};
use flexmap_core::net::PerUnitBase;
use flexmap_core::sweep::{extract_boundary, SweepResult};

use crate::io::{write_json, DataError};
use crate::sweep_io::{grid_kw, SweepMeta, SWEEP_FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRecord {
    pub i: usize,
    pub j: usize,
    pub dp_kw: f64,
    pub dq_kvar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwapRecord {
    pub cell: CellRecord,
    pub channel: &'static str,
    pub producing: Vec<String>,
    pub consuming: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftRecord {
    pub from: CellRecord,
    pub to: CellRecord,
    pub unit: String,
    pub channel: &'static str,
    /// Setpoint change `to − from`, kW or kVAr.
    pub jump_kw: f64,
}

/// Serialised [`AreaReport`] of one sweep, in engineering units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaRecord {
    pub mode: String,
    pub cells: usize,
    pub optimal_cells: usize,
    pub feasible_area_pu2: f64,
    pub hull_area_pu2: f64,
    pub nonconvexity_gap: f64,
    pub boundary_area_pu2: f64,
    /// Counter-clockwise hull vertices `[dp_kw, dq_kvar]`.
    pub hull_kw: Vec<[f64; 2]>,
    pub hull_infeasible_cells: Vec<CellRecord>,
    pub swap_cells: Vec<SwapRecord>,
    pub shift_hotspots: Vec<ShiftRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    /// Every swap-free optimal cell is optimal in the full sweep.
    pub subset: bool,
    /// Subset, and the full sweep has more optimal cells.
    pub strict_subset: bool,
    /// Optimal in the full sweep only.
    pub cells_lost: usize,
    /// Optimal in the swap-free sweep only (violations of nesting).
    pub swap_free_only: Vec<CellRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub format_version: u32,
    pub swap_threshold_kw: f64,
    pub jump_threshold_kw: f64,
    pub sweep: AreaRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swap_free: Option<AreaRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

fn cell_record(sweep: &SweepResult, base: PerUnitBase, (i, j): Cell) -> CellRecord {
    let r = sweep.spec.request(i, j);
    CellRecord {
        i,
        j,
        dp_kw: grid_kw(base, r.dp),
        dq_kvar: grid_kw(base, r.dq),
    }
}

fn names(all: &[String], idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&u| all[u].clone()).collect()
}

pub fn area_record(
    sweep: &SweepResult,
    rep: &AreaReport,
    unit_names: &[String],
    base: PerUnitBase,
) -> AreaRecord {
    AreaRecord {
        mode: sweep.mode.as_str().into(),
        cells: sweep.cells.len(),
        optimal_cells: sweep.optimal_count(),
        feasible_area_pu2: rep.feasible_area,
        hull_area_pu2: rep.hull_area,
        nonconvexity_gap: rep.nonconvexity_gap,
        boundary_area_pu2: extract_boundary(sweep).area(),
        hull_kw: rep
            .hull
            .iter()
            .map(|&(p, q)| [grid_kw(base, p), grid_kw(base, q)])
            .collect(),
        hull_infeasible_cells: rep
            .hull_infeasible_cells
            .iter()
            .map(|&c| cell_record(sweep, base, c))
            .collect(),
        swap_cells: rep
            .swap_cells
            .iter()
            .map(|s| SwapRecord {
                cell: cell_record(sweep, base, s.cell),
                channel: s.channel.as_str(),
                producing: names(unit_names, &s.producing),
                consuming: names(unit_names, &s.consuming),
            })
            .collect(),
        shift_hotspots: rep
            .shift_hotspots
            .iter()
            .map(|h| ShiftRecord {
                from: cell_record(sweep, base, h.from),
                to: cell_record(sweep, base, h.to),
                unit: unit_names[h.unit].clone(),
                channel: h.channel.as_str(),
                jump_kw: base.pu_to_kw(h.jump),
            })
            .collect(),
    }
}

/// Cell-set comparison of a full and a swap-free sweep on the same grid.
pub fn compare(full: &SweepResult, swap_free: &SweepResult, base: PerUnitBase) -> Comparison {
    let mut lost = 0;
    let mut extra = Vec::new();
    for (k, (a, b)) in full.cells.iter().zip(&swap_free.cells).enumerate() {
        match (a.is_optimal(), b.is_optimal()) {
            (true, false) => lost += 1,
            (false, true) => extra.push(cell_record(full, base, full.spec.cell(k))),
            _ => {}
        }
    }
    Comparison {
        subset: extra.is_empty(),
        strict_subset: extra.is_empty() && lost > 0,
        cells_lost: lost,
        swap_free_only: extra,
    }
}

/// Whether two sweeps share grid and units.
pub fn same_grid(a: &SweepMeta, b: &SweepMeta) -> bool {
    a.grid == b.grid && a.unit_names() == b.unit_names() && a.base_mva == b.base_mva
}

/// Builds the report; thresholds in kW/kVAr.
pub fn build_report(
    sweep: &SweepResult,
    meta: &SweepMeta,
    swap_free: Option<&SweepResult>,
    swap_threshold_kw: f64,
    jump_threshold_kw: f64,
) -> Report {
    let base = meta.base().expect("validated base");
    let names = meta.unit_names();
    let (st, jt) = (
        base.kw_to_pu(swap_threshold_kw),
        base.kw_to_pu(jump_threshold_kw),
    );
    let main = area_record(sweep, &analyze(sweep, st, jt), &names, base);
    let sf = swap_free.map(|s| area_record(s, &analyze(s, st, jt), &names, base));
    Report {
        format_version: SWEEP_FORMAT_VERSION,
        swap_threshold_kw,
        jump_threshold_kw,
        sweep: main,
        swap_free: sf,
        comparison: swap_free.map(|s| compare(sweep, s, base)),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, DataError> {
    csv::Writer::from_path(path).map_err(|source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows(
    path: &Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<(), DataError> {
    let err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub const SWAPS_HEADER: [&str; 7] = [
    "i",
    "j",
    "dp_kw",
    "dq_kvar",
    "channel",
    "producing",
    "consuming",
];

pub const SHIFTS_HEADER: [&str; 11] = [
    "from_i",
    "from_j",
    "to_i",
    "to_j",
    "from_dp_kw",
    "from_dq_kvar",
    "to_dp_kw",
    "to_dq_kvar",
    "unit",
    "channel",
    "jump_kw",
];

/// Writes `report.json`, `swaps.csv` and `shifts.csv` into `dir`. The tables
/// describe the primary sweep; unit lists are `;`-separated.
pub fn write_report(dir: &Path, report: &Report) -> Result<(), DataError> {
    write_json(&dir.join("report.json"), report)?;
    let s = &report.sweep;
    write_rows(
        &dir.join("swaps.csv"),
        &SWAPS_HEADER,
        s.swap_cells.iter().map(|c| {
            vec![
                c.cell.i.to_string(),
                c.cell.j.to_string(),
                c.cell.dp_kw.to_string(),
                c.cell.dq_kvar.to_string(),
                c.channel.to_string(),
                c.producing.join(";"),
                c.consuming.join(";"),
            ]
        }),
    )?;
    write_rows(
        &dir.join("shifts.csv"),
        &SHIFTS_HEADER,
        s.shift_hotspots.iter().map(|h| {
            vec![
                h.from.i.to_string(),
                h.from.j.to_string(),
                h.to.i.to_string(),
                h.to.j.to_string(),
                h.from.dp_kw.to_string(),
                h.from.dq_kvar.to_string(),
                h.to.dp_kw.to_string(),
                h.to.dq_kvar.to_string(),
                h.unit.clone(),
                h.channel.to_string(),
                h.jump_kw.to_string(),
            ]
        }),
    )
}
