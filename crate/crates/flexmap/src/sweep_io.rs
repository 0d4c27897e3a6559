//! Sweep CSV files and their JSON metadata sidecar.
//!
//! The CSV holds one row per cell in engineering units. The sidecar
//! (`<csv>.meta.json`) holds the exact per-unit grid, the unit list, solver
//! options, input hashes and the creation time, so a CSV can be read back
//! into a [`SweepResult`].

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flexmap_core::distflow::PfOptions;
use flexmap_core::flexopf::{
    split_regulation, Dispatch, GradientMode, SolveStatus, SolverOptions, UnitDispatch,
};
use flexmap_core::net::{BusId, FlexUnit, PerUnitBase, RadialNetwork};
use flexmap_core::sweep::{GridSpec, MinVoltage, SweepCell, SweepMetadata, SweepMode, SweepResult};

use crate::io::{read, write_json, DataError};

/// Version of the CSV column layout and of the sidecar schema.
pub const SWEEP_FORMAT_VERSION: u32 = 1;

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Path of the metadata sidecar of a sweep CSV.
pub fn meta_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRecord {
    pub dp_min_pu: f64,
    pub dp_max_pu: f64,
    pub dq_min_pu: f64,
    pub dq_max_pu: f64,
    pub step_pu: f64,
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitInfo {
    pub name: String,
    pub bus: BusId,
    pub p0_pu: f64,
    pub q0_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverRecord {
    pub interface_tol: f64,
    pub stat_tol: f64,
    pub violation_tol: f64,
    pub max_restarts: usize,
    pub seed: u64,
    pub gradient: String,
    pub max_outer: usize,
    pub max_inner: usize,
    pub pf_tol: f64,
    pub pf_max_iter: usize,
}

impl SolverRecord {
    pub fn from_options(o: &SolverOptions) -> Self {
        Self {
            interface_tol: o.interface_tol,
            stat_tol: o.stat_tol,
            violation_tol: o.violation_tol,
            max_restarts: o.max_restarts,
            seed: o.seed,
            gradient: gradient_name(o.gradient).into(),
            max_outer: o.max_outer,
            max_inner: o.max_inner,
            pf_tol: o.pf.tol,
            pf_max_iter: o.pf.max_iter,
        }
    }

    pub fn to_options(&self) -> Option<SolverOptions> {
        Some(SolverOptions {
            interface_tol: self.interface_tol,
            stat_tol: self.stat_tol,
            violation_tol: self.violation_tol,
            max_restarts: self.max_restarts,
            seed: self.seed,
            gradient: parse_gradient(&self.gradient)?,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            pf: PfOptions {
                tol: self.pf_tol,
                max_iter: self.pf_max_iter,
            },
        })
    }
}

pub fn gradient_name(g: GradientMode) -> &'static str {
    match g {
        GradientMode::Adjoint => "adjoint",
        GradientMode::FiniteDifference => "fd",
    }
}

pub fn parse_gradient(s: &str) -> Option<GradientMode> {
    match s {
        "adjoint" => Some(GradientMode::Adjoint),
        "fd" => Some(GradientMode::FiniteDifference),
        _ => None,
    }
}

pub fn parse_mode(s: &str) -> Option<SweepMode> {
    match s {
        "full" => Some(SweepMode::Full),
        "swap_free" => Some(SweepMode::SwapFree),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSummary {
    pub cells: usize,
    pub optimal: usize,
    pub infeasible: usize,
    pub not_converged: usize,
}

impl SweepSummary {
    pub fn of(cells: &[SweepCell]) -> Self {
        let count = |s| cells.iter().filter(|c| c.status == s).count();
        Self {
            cells: cells.len(),
            optimal: count(SolveStatus::Optimal),
            infeasible: count(SolveStatus::Infeasible),
            not_converged: count(SolveStatus::NotConverged),
        }
    }
}

/// Contents of the metadata sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepMeta {
    pub format_version: u32,
    pub mode: String,
    pub base_mva: f64,
    pub base_kv: f64,
    pub grid: GridRecord,
    pub units: Vec<UnitInfo>,
    pub network: InputFile,
    pub units_file: InputFile,
    pub solver: SolverRecord,
    /// Unix seconds at creation.
    pub timestamp: u64,
    /// Present once every cell has been written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<SweepSummary>,
}

impl SweepMeta {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: &RadialNetwork,
        units: &[FlexUnit],
        spec: GridSpec,
        mode: SweepMode,
        opts: &SolverOptions,
        network: InputFile,
        units_file: InputFile,
        timestamp: u64,
    ) -> Self {
        let (nx, ny) = spec.counts();
        Self {
            format_version: SWEEP_FORMAT_VERSION,
            mode: mode.as_str().into(),
            base_mva: net.base_mva(),
            base_kv: net.base_kv(),
            grid: GridRecord {
                dp_min_pu: spec.dp_min,
                dp_max_pu: spec.dp_max,
                dq_min_pu: spec.dq_min,
                dq_max_pu: spec.dq_max,
                step_pu: spec.step,
                nx,
                ny,
            },
            units: units
                .iter()
                .map(|u| UnitInfo {
                    name: u.name.clone(),
                    bus: u.bus,
                    p0_pu: u.p0,
                    q0_pu: u.q0,
                })
                .collect(),
            network,
            units_file,
            solver: SolverRecord::from_options(opts),
            timestamp,
            summary: None,
        }
    }

    pub fn spec(&self) -> Option<GridSpec> {
        let g = &self.grid;
        let spec = GridSpec::new(
            g.dp_min_pu,
            g.dp_max_pu,
            g.dq_min_pu,
            g.dq_max_pu,
            g.step_pu,
        )
        .ok()?;
        (spec.counts() == (g.nx, g.ny)).then_some(spec)
    }

    pub fn base(&self) -> Option<PerUnitBase> {
        PerUnitBase::new(self.base_mva, self.base_kv).ok()
    }

    pub fn unit_names(&self) -> Vec<String> {
        self.units.iter().map(|u| u.name.clone()).collect()
    }

    /// Whether a sweep described by `other` writes the same cells, ignoring
    /// the timestamp and summary.
    pub fn same_job(&self, other: &SweepMeta) -> bool {
        let strip = |m: &SweepMeta| SweepMeta {
            timestamp: 0,
            summary: None,
            ..m.clone()
        };
        strip(self) == strip(other)
    }

    fn validate(&self, path: &Path) -> Result<(GridSpec, PerUnitBase, SweepMode), DataError> {
        if self.format_version != SWEEP_FORMAT_VERSION {
            return Err(DataError::Version {
                path: path.to_path_buf(),
                found: self.format_version,
            });
        }
        let spec = self
            .spec()
            .ok_or_else(|| DataError::invalid(path, "inconsistent grid"))?;
        let base = self
            .base()
            .ok_or_else(|| DataError::invalid(path, "invalid base"))?;
        let mode = parse_mode(&self.mode)
            .ok_or_else(|| DataError::invalid(path, format!("unknown mode {:?}", self.mode)))?;
        if self.solver.to_options().is_none() {
            return Err(DataError::invalid(path, "unknown gradient mode"));
        }
        Ok((spec, base, mode))
    }
}

pub fn write_meta(csv: &Path, meta: &SweepMeta) -> Result<(), DataError> {
    write_json(&meta_path(csv), meta)
}

pub fn read_meta(csv: &Path) -> Result<SweepMeta, DataError> {
    let path = meta_path(csv);
    let text = read(&path)?;
    serde_json::from_str(&text).map_err(|source| DataError::Parse { path, source })
}

/// Grid coordinate in kW, rounded to 1e-6 kW so that CSVs and reports show
/// the decimal grid rather than per-unit rounding noise.
pub fn grid_kw(base: PerUnitBase, pu: f64) -> f64 {
    (base.pu_to_kw(pu) * 1e6).round() / 1e6
}

/// Fixed column order of the sweep CSV.
pub fn csv_header(unit_names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["dp_kw", "dq_kvar", "status", "cost_usd"]
        .map(String::from)
        .to_vec();
    for n in unit_names {
        h.push(format!("p_{n}_kw"));
        h.push(format!("q_{n}_kvar"));
    }
    h.extend(["vmin_pu", "vmin_bus", "restarts", "interface_err_kva"].map(String::from));
    h
}

/// CSV fields of cell `k`. Floats use the shortest round-trip notation.
pub fn cell_record(spec: &GridSpec, base: PerUnitBase, k: usize, cell: &SweepCell) -> Vec<String> {
    let (i, j) = spec.cell(k);
    let req = spec.request(i, j);
    let mut r = vec![
        grid_kw(base, req.dp).to_string(),
        grid_kw(base, req.dq).to_string(),
        cell.status.as_str().to_string(),
        cell.cost.to_string(),
    ];
    for d in &cell.dispatch.units {
        r.push(base.pu_to_kw(d.p).to_string());
        r.push(base.pu_to_kw(d.q).to_string());
    }
    match cell.vmin {
        Some(m) => {
            r.push(m.v.to_string());
            r.push(m.bus.to_string());
        }
        None => {
            r.push(String::new());
            r.push(String::new());
        }
    }
    r.push(cell.restarts_used.to_string());
    r.push(base.pu_to_kw(cell.interface_error).to_string());
    r
}

fn parse_status(s: &str) -> Option<SolveStatus> {
    match s {
        "optimal" => Some(SolveStatus::Optimal),
        "infeasible" => Some(SolveStatus::Infeasible),
        "not_converged" => Some(SolveStatus::NotConverged),
        _ => None,
    }
}

struct RowContext<'a> {
    spec: GridSpec,
    base: PerUnitBase,
    units: &'a [UnitInfo],
}

impl RowContext<'_> {
    fn parse(&self, rec: &csv::StringRecord) -> Result<(usize, SweepCell), String> {
        let f = |k: usize| -> Result<f64, String> {
            rec[k]
                .parse::<f64>()
                .map_err(|_| format!("bad number {:?}", &rec[k]))
        };
        let (dp, dq) = (self.base.kw_to_pu(f(0)?), self.base.kw_to_pu(f(1)?));
        let (i, j) = self
            .spec
            .nearest_cell(dp, dq)
            .ok_or_else(|| format!("request ({}, {}) is outside the grid", &rec[0], &rec[1]))?;
        let req = self.spec.request(i, j);
        let tol = 1e-6 * self.spec.step;
        if (req.dp - dp).abs() > tol || (req.dq - dq).abs() > tol {
            return Err(format!(
                "request ({}, {}) is off the grid",
                &rec[0], &rec[1]
            ));
        }
        let status =
            parse_status(&rec[2]).ok_or_else(|| format!("unknown status {:?}", &rec[2]))?;
        let cost = f(3)?;
        let mut units = Vec::with_capacity(self.units.len());
        for (u, info) in self.units.iter().enumerate() {
            let p = self.base.kw_to_pu(f(4 + 2 * u)?);
            let q = self.base.kw_to_pu(f(5 + 2 * u)?);
            let (p_up, p_dn) = split_regulation(p, info.p0_pu);
            let (q_up, q_dn) = split_regulation(q, info.q0_pu);
            units.push(UnitDispatch {
                p,
                q,
                p_up,
                p_dn,
                q_up,
                q_dn,
            });
        }
        let c = 4 + 2 * self.units.len();
        let vmin = match (&rec[c], &rec[c + 1]) {
            ("", "") => None,
            (v, b) => Some(MinVoltage {
                v: v.parse().map_err(|_| format!("bad voltage {v:?}"))?,
                bus: b.parse().map_err(|_| format!("bad bus {b:?}"))?,
            }),
        };
        let restarts_used = rec[c + 2]
            .parse()
            .map_err(|_| format!("bad restart count {:?}", &rec[c + 2]))?;
        let interface_error = self.base.kw_to_pu(f(c + 3)?);
        let cell = SweepCell {
            status,
            dispatch: Dispatch { units },
            cost,
            interface_error,
            restarts_used,
            vmin,
        };
        Ok((self.spec.index(i, j), cell))
    }
}

/// Reads the rows of a sweep CSV keyed by cell index. With `partial`, a
/// trailing line without a newline (an interrupted write) is ignored and a
/// missing file yields no rows.
pub fn read_rows(
    csv_path: &Path,
    meta: &SweepMeta,
    partial: bool,
) -> Result<BTreeMap<usize, SweepCell>, DataError> {
    Ok(read_records(csv_path, meta, partial)?
        .into_iter()
        .map(|(k, (c, _))| (k, c))
        .collect())
}

/// Like [`read_rows`], also returning the raw fields of every row.
pub fn read_records(
    csv_path: &Path,
    meta: &SweepMeta,
    partial: bool,
) -> Result<BTreeMap<usize, (SweepCell, Vec<String>)>, DataError> {
    let (spec, base, _) = meta.validate(&meta_path(csv_path))?;
    if partial && !csv_path.exists() {
        return Ok(BTreeMap::new());
    }
    let mut text = read(csv_path)?;
    if partial {
        match text.rfind('\n') {
            Some(end) => text.truncate(end + 1),
            None => text.clear(),
        }
        if text.is_empty() {
            return Ok(BTreeMap::new());
        }
    }
    let csv_err = |source| DataError::Csv {
        path: csv_path.to_path_buf(),
        source,
    };
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rd
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    if header != csv_header(&meta.unit_names()) {
        return Err(DataError::invalid(
            csv_path,
            "CSV header does not match the sweep layout",
        ));
    }
    let ctx = RowContext {
        spec,
        base,
        units: &meta.units,
    };
    let mut rows = BTreeMap::new();
    for (n, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = n + 2;
        let (k, cell) = ctx
            .parse(&rec)
            .map_err(|m| DataError::invalid(csv_path, format!("line {line}: {m}")))?;
        if rows
            .insert(k, (cell, rec.iter().map(String::from).collect()))
            .is_some()
        {
            return Err(DataError::invalid(
                csv_path,
                format!("line {line}: duplicate cell"),
            ));
        }
    }
    Ok(rows)
}

/// Reads a complete sweep (CSV plus sidecar).
pub fn load_sweep(csv_path: &Path) -> Result<(SweepResult, SweepMeta), DataError> {
    let meta = read_meta(csv_path)?;
    let (spec, _, mode) = meta.validate(&meta_path(csv_path))?;
    let mut rows = read_rows(csv_path, &meta, false)?;
    let mut cells = Vec::with_capacity(spec.len());
    for k in 0..spec.len() {
        let cell = rows.remove(&k).ok_or_else(|| {
            let (i, j) = spec.cell(k);
            DataError::invalid(csv_path, format!("missing cell ({i}, {j})"))
        })?;
        cells.push(cell);
    }
    let metadata = SweepMetadata {
        network_hash: meta.network.sha256.clone(),
        units_hash: meta.units_file.sha256.clone(),
        options: meta.solver.to_options().unwrap_or_default(),
        timestamp: meta.timestamp,
    };
    Ok((
        SweepResult {
            spec,
            mode,
            cells,
            metadata,
        },
        meta,
    ))
}

/// Incremental CSV writer; rows are flushed after every batch.
pub struct SweepWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl SweepWriter {
    /// Creates the file and writes the header, or appends to it.
    pub fn open(path: &Path, unit_names: &[String], append: bool) -> Result<Self, DataError> {
        let io_err = |source| DataError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = if append {
            let mut f = OpenOptions::new()
                .read(true)
                .append(true)
                .open(path)
                .map_err(io_err)?;
            // Drop an interrupted last line so appended rows start cleanly.
            let text = fs::read_to_string(path).map_err(io_err)?;
            let keep = text.rfind('\n').map_or(0, |e| e + 1);
            if keep < text.len() {
                f.set_len(keep as u64).map_err(io_err)?;
            }
            f.flush().map_err(io_err)?;
            f
        } else {
            File::create(path).map_err(io_err)?
        };
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        if !append || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true) {
            inner
                .write_record(csv_header(unit_names))
                .map_err(|source| DataError::Csv {
                    path: path.to_path_buf(),
                    source,
                })?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn write_batch<'a>(
        &mut self,
        spec: &GridSpec,
        base: PerUnitBase,
        rows: impl IntoIterator<Item = (usize, &'a SweepCell)>,
    ) -> Result<(), DataError> {
        for (k, cell) in rows {
            self.inner
                .write_record(cell_record(spec, base, k, cell))
                .map_err(|source| DataError::Csv {
                    path: self.path.clone(),
                    source,
                })?;
        }
        self.inner.flush().map_err(|source| DataError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Writes a header and pre-formatted records.
pub fn write_records(
    path: &Path,
    unit_names: &[String],
    records: &[Vec<String>],
) -> Result<(), DataError> {
    let err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(csv_header(unit_names)).map_err(err)?;
    for r in records {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a complete sweep in grid order together with its sidecar.
pub fn save_sweep(csv_path: &Path, sweep: &SweepResult, meta: &SweepMeta) -> Result<(), DataError> {
    let base = meta
        .base()
        .ok_or_else(|| DataError::invalid(csv_path, "invalid base"))?;
    let mut w = SweepWriter::open(csv_path, &meta.unit_names(), false)?;
    w.write_batch(&sweep.spec, base, sweep.cells.iter().enumerate())?;
    write_meta(csv_path, meta)
}
