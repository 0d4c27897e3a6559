//! The `flexmap` command line.
//!
//! Every flag can also be given in a JSON config file (`--config`) under its
//! snake_case name; flags override the file. Exit codes: 0 success, 1 usage
//! or configuration error, 2 data error, 3 numerical failure.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use flexmap_core::distflow::{solve_power_flow, PfOptions};
use flexmap_core::flexopf::{
    Dispatch, FlexError, FlexProblem, FlexRequest, GradientMode, SolveStatus, SolverOptions,
};
use flexmap_core::net::{BusId, FlexUnit, RadialNetwork};
use flexmap_core::sweep::{GridSpec, SweepCell, SweepMode};

use crate::io::{self, DataError};
use crate::render::{render_files, Figure, RenderOptions};
use crate::report::{build_report, same_grid, write_report};
use crate::runner::{solve_cells, thread_pool};
use crate::sweep_io::{
    cell_record, load_sweep, meta_path, read_meta, read_records, sha256_hex, write_meta,
    write_records, InputFile, SweepMeta, SweepSummary, SweepWriter,
};

/// Default grid step, kVA.
pub const DEFAULT_STEP_KVA: f64 = 16.66;
pub const DEFAULT_SWAP_THRESHOLD_KW: f64 = 10.0;
pub const DEFAULT_JUMP_THRESHOLD_KW: f64 = 250.0;

#[derive(Debug, Parser)]
#[command(
    name = "flexmap",
    version,
    about = "P-Q flexibility maps of radial distribution networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Power flow at the initial operating point: per-bus voltages and per-line flows.
    Pf(PfArgs),
    /// Cheapest dispatch for a single interface request.
    Opf(OpfArgs),
    /// Solve every cell of a request grid and write the sweep CSV.
    Sweep(SweepArgs),
    /// Heatmap and boundary SVGs from sweep CSVs.
    Render(RenderArgs),
    /// Hull, nonconvexity, swap and shift diagnostics from sweep CSVs.
    Analyze(AnalyzeArgs),
}

/// Closed interval `lo:hi` in kW or kVAr.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct KwRange(pub f64, pub f64);

impl FromStr for KwRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .split_once(':')
            .or_else(|| s.split_once(','))
            .ok_or_else(|| format!("expected LO:HI, got {s:?}"))?;
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad number {t:?}"))
        };
        Ok(KwRange(num(a)?, num(b)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Full,
    #[serde(alias = "swap_free")]
    SwapFree,
}

impl From<ModeArg> for SweepMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => SweepMode::Full,
            ModeArg::SwapFree => SweepMode::SwapFree,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientArg {
    Adjoint,
    Fd,
}

/// Fills `None` fields of `self` from `other`.
trait Merge {
    fn merge(&mut self, other: Self);
}

macro_rules! mergeable {
    ($t:ty; $($f:ident),*) => {
        impl Merge for $t {
            fn merge(&mut self, other: Self) {
                $( if self.$f.is_none() { self.$f = other.$f; } )*
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct InputArgs {
    /// Network JSON file (default: the bundled 33-bus feeder).
    #[arg(long)]
    pub net: Option<PathBuf>,
    /// Flexible units JSON file (default: the bundled units when --net is also omitted).
    #[arg(long)]
    pub units: Option<PathBuf>,
}
mergeable!(InputArgs; net, units);

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct SolverArgs {
    /// Accepted interface mismatch, p.u.
    #[arg(long)]
    pub interface_tol: Option<f64>,
    /// Stationarity tolerance of the subproblems.
    #[arg(long)]
    pub stat_tol: Option<f64>,
    /// Accepted voltage (p.u.²) or thermal (p.u.) limit violation.
    #[arg(long)]
    pub violation_tol: Option<f64>,
    /// Random restarts when no standard start is feasible.
    #[arg(long)]
    pub max_restarts: Option<usize>,
    /// Seed of the random restarts.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradient evaluation.
    #[arg(long, value_enum)]
    pub gradient: Option<GradientArg>,
}
mergeable!(SolverArgs; interface_tol, stat_tol, violation_tol, max_restarts, seed, gradient);

impl SolverArgs {
    fn options(&self) -> SolverOptions {
        let mut o = SolverOptions::default();
        if let Some(v) = self.interface_tol {
            o.interface_tol = v;
        }
        if let Some(v) = self.stat_tol {
            o.stat_tol = v;
        }
        if let Some(v) = self.violation_tol {
            o.violation_tol = v;
        }
        if let Some(v) = self.max_restarts {
            o.max_restarts = v;
        }
        if let Some(v) = self.seed {
            o.seed = v;
        }
        if let Some(g) = self.gradient {
            o.gradient = match g {
                GradientArg::Adjoint => GradientMode::Adjoint,
                GradientArg::Fd => GradientMode::FiniteDifference,
            };
        }
        o
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct PfArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Also write pf_buses.csv and pf_lines.csv here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct OpfArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Requested change of interface active power, kW.
    #[arg(long, allow_hyphen_values = true)]
    pub dp_kw: Option<f64>,
    /// Requested change of interface reactive power, kVAr.
    #[arg(long, allow_hyphen_values = true)]
    pub dq_kvar: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Also write opf.json here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct SweepArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Active power request range LO:HI, kW (default: aggregate unit capability).
    #[arg(long, allow_hyphen_values = true)]
    pub dp_range: Option<KwRange>,
    /// Reactive power request range LO:HI, kVAr (default: aggregate unit capability).
    #[arg(long, allow_hyphen_values = true)]
    pub dq_range: Option<KwRange>,
    /// Grid step, kVA.
    #[arg(long)]
    pub step_kva: Option<f64>,
    /// Extra steps around the default capability ranges.
    #[arg(long)]
    pub pad_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory for sweep_<mode>.csv and its metadata.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Keep the cells already in the CSV and solve only the rest.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct RenderArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Sweep CSV to draw.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    /// Swap-free sweep CSV on the same grid; its boundary is drawn dashed.
    #[arg(long)]
    pub swap_free: Option<PathBuf>,
    /// Colour-scale limit, kW/kVAr (default: largest regulation over all layers).
    #[arg(long)]
    pub scale_kw: Option<f64>,
    /// Pixel size of one grid cell.
    #[arg(long)]
    pub cell_px: Option<u32>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
pub struct AnalyzeArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Sweep CSV to analyse.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    /// Swap-free sweep CSV on the same grid, for the nesting comparison.
    #[arg(long)]
    pub swap_free: Option<PathBuf>,
    /// Regulation magnitude counted as active in swap detection, kW/kVAr.
    #[arg(long)]
    pub swap_threshold_kw: Option<f64>,
    /// Setpoint jump between adjacent cells reported as a shift, kW/kVAr.
    #[arg(long)]
    pub jump_threshold_kw: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl Merge for PfArgs {
    fn merge(&mut self, o: Self) {
        self.input.merge(o.input);
        self.out_dir = self.out_dir.take().or(o.out_dir);
    }
}

impl Merge for OpfArgs {
    fn merge(&mut self, o: Self) {
        self.input.merge(o.input);
        self.solver.merge(o.solver);
        self.dp_kw = self.dp_kw.or(o.dp_kw);
        self.dq_kvar = self.dq_kvar.or(o.dq_kvar);
        self.mode = self.mode.or(o.mode);
        self.out_dir = self.out_dir.take().or(o.out_dir);
    }
}

impl Merge for SweepArgs {
    fn merge(&mut self, o: Self) {
        self.input.merge(o.input);
        self.solver.merge(o.solver);
        self.dp_range = self.dp_range.or(o.dp_range);
        self.dq_range = self.dq_range.or(o.dq_range);
        self.step_kva = self.step_kva.or(o.step_kva);
        self.pad_steps = self.pad_steps.or(o.pad_steps);
        self.mode = self.mode.or(o.mode);
        self.workers = self.workers.or(o.workers);
        self.out_dir = self.out_dir.take().or(o.out_dir);
        self.resume |= o.resume;
    }
}
mergeable!(RenderArgs; sweep, swap_free, scale_kw, cell_px, out_dir);
mergeable!(AnalyzeArgs; sweep, swap_free, swap_threshold_kw, jump_threshold_kw, out_dir);

/// Every key a config file may contain.
const CONFIG_KEYS: &[&str] = &[
    "net",
    "units",
    "interface_tol",
    "stat_tol",
    "violation_tol",
    "max_restarts",
    "seed",
    "gradient",
    "dp_kw",
    "dq_kvar",
    "mode",
    "out_dir",
    "dp_range",
    "dq_range",
    "step_kva",
    "pad_steps",
    "workers",
    "resume",
    "sweep",
    "swap_free",
    "scale_kw",
    "cell_px",
    "swap_threshold_kw",
    "jump_threshold_kw",
];

/// Command failure with its exit code class.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

fn problem_failure(e: FlexError) -> Failure {
    match e {
        FlexError::Unit(_) => Failure::Data(e.to_string()),
        FlexError::BaseCase(_) => Failure::Numerical(e.to_string()),
        FlexError::Options(_) | FlexError::Request => Failure::Usage(e.to_string()),
    }
}

/// Loads `--config` (if any) and fills unset flags from it.
fn with_config<T: Merge + DeserializeOwned>(
    mut args: T,
    config: Option<&Path>,
) -> Result<T, Failure> {
    let Some(path) = config else { return Ok(args) };
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Failure::Usage(format!("{}: expected a JSON object", path.display())))?;
    let known: BTreeSet<&str> = CONFIG_KEYS.iter().copied().collect();
    if let Some(k) = obj.keys().find(|k| !known.contains(k.as_str())) {
        return Err(Failure::Usage(format!(
            "{}: unknown key {k:?}",
            path.display()
        )));
    }
    let file: T = serde_json::from_value(value)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    args.merge(file);
    Ok(args)
}

struct Inputs {
    net: RadialNetwork,
    units: Vec<FlexUnit>,
    net_file: InputFile,
    units_file: InputFile,
}

fn read_input(path: &Path) -> Result<(String, InputFile), Failure> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let info = InputFile {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    };
    let text = String::from_utf8(bytes).map_err(|_| DataError::Invalid {
        path: path.to_path_buf(),
        message: "not UTF-8".into(),
    })?;
    Ok((text, info))
}

fn bundled(name: &str, text: &str) -> InputFile {
    InputFile {
        path: format!("bundled:{name}"),
        sha256: sha256_hex(text.as_bytes()),
    }
}

fn load_inputs(args: &InputArgs, need_units: bool) -> Result<Inputs, Failure> {
    let (net, net_file) = match &args.net {
        Some(p) => {
            let (text, info) = read_input(p)?;
            (io::parse_network(&text, p)?, info)
        }
        None => (io::ieee33(), bundled("ieee33.json", io::IEEE33_JSON)),
    };
    let (units, units_file) = match (&args.units, &args.net) {
        (Some(p), _) => {
            let (text, info) = read_input(p)?;
            (io::parse_units(&text, p, &net)?, info)
        }
        (None, None) => (
            io::ieee33_units(&net),
            bundled("ieee33_units.json", io::IEEE33_UNITS_JSON),
        ),
        (None, Some(_)) if need_units => {
            return Err(Failure::Usage(
                "--units is required when --net is given".into(),
            ))
        }
        (None, Some(_)) => (
            Vec::new(),
            InputFile {
                path: String::new(),
                sha256: String::new(),
            },
        ),
    };
    Ok(Inputs {
        net,
        units,
        net_file,
        units_file,
    })
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))
}

fn csv_failure(path: &Path) -> impl Fn(csv::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(csv_failure(path))?;
    w.write_record(header).map_err(csv_failure(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_failure(path))?;
    }
    w.flush()
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

pub const PF_BUS_HEADER: [&str; 6] = [
    "bus",
    "v_pu",
    "v_min_pu",
    "v_max_pu",
    "load_p_kw",
    "load_q_kvar",
];
pub const PF_LINE_HEADER: [&str; 8] = [
    "from_bus",
    "to_bus",
    "p_kw",
    "q_kvar",
    "i_sq_pu",
    "loss_p_kw",
    "loss_q_kvar",
    "s_max_kva",
];

fn cmd_pf(args: PfArgs) -> Result<(), Failure> {
    let args = with_config(args.clone(), args.config.as_deref())?;
    let inp = load_inputs(&args.input, false)?;
    let (net, base) = (&inp.net, inp.net.base());
    let inj = Dispatch::initial(&inp.units).injections(&inp.units);
    let st = solve_power_flow(net, &inj, &PfOptions::default())
        .map_err(|e| Failure::Numerical(format!("power flow: {e}")))?;
    let buses: Vec<Vec<String>> = net
        .buses()
        .iter()
        .enumerate()
        .map(|(k, b)| {
            vec![
                b.id.to_string(),
                st.voltage_magnitude(k).to_string(),
                b.v_min.sqrt().to_string(),
                b.v_max.sqrt().to_string(),
                base.pu_to_kw(b.load_p).to_string(),
                base.pu_to_kw(b.load_q).to_string(),
            ]
        })
        .collect();
    let lines: Vec<Vec<String>> = net
        .lines()
        .iter()
        .enumerate()
        .map(|(l, ln)| {
            vec![
                ln.from_bus.to_string(),
                ln.to_bus.to_string(),
                base.pu_to_kw(st.p_flow[l]).to_string(),
                base.pu_to_kw(st.q_flow[l]).to_string(),
                st.ell[l].to_string(),
                base.pu_to_kw(ln.r * st.ell[l]).to_string(),
                base.pu_to_kw(ln.x * st.ell[l]).to_string(),
                ln.s_max
                    .map(|s| base.pu_to_kw(s).to_string())
                    .unwrap_or_default(),
            ]
        })
        .collect();
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        write_table(&dir.join("pf_buses.csv"), &PF_BUS_HEADER, &buses)?;
        write_table(&dir.join("pf_lines.csv"), &PF_LINE_HEADER, &lines)?;
    }
    let mut w = csv::Writer::from_writer(std::io::stdout());
    let stdout_err = |e: csv::Error| Failure::Data(format!("stdout: {e}"));
    w.write_record(PF_BUS_HEADER).map_err(stdout_err)?;
    for r in &buses {
        w.write_record(r).map_err(stdout_err)?;
    }
    w.flush()
        .map_err(|e| Failure::Data(format!("stdout: {e}")))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct OpfUnit {
    name: String,
    bus: BusId,
    p_kw: f64,
    q_kvar: f64,
    dp_kw: f64,
    dq_kvar: f64,
    p_up_kw: f64,
    p_dn_kw: f64,
    q_up_kvar: f64,
    q_dn_kvar: f64,
}

#[derive(Debug, Serialize)]
struct OpfOutput {
    dp_kw: f64,
    dq_kvar: f64,
    mode: &'static str,
    status: &'static str,
    cost_usd: f64,
    interface_err_kva: f64,
    restarts: usize,
    vmin_pu: Option<f64>,
    vmin_bus: Option<BusId>,
    units: Vec<OpfUnit>,
}

fn cmd_opf(args: OpfArgs) -> Result<(), Failure> {
    let args = with_config(args.clone(), args.config.as_deref())?;
    let inp = load_inputs(&args.input, true)?;
    let base = inp.net.base();
    let opts = args.solver.options();
    let prob = FlexProblem::new(&inp.net, &inp.units, opts).map_err(problem_failure)?;
    let (dp_kw, dq_kvar) = (args.dp_kw.unwrap_or(0.0), args.dq_kvar.unwrap_or(0.0));
    let req = FlexRequest {
        dp: base.kw_to_pu(dp_kw),
        dq: base.kw_to_pu(dq_kvar),
    };
    let mode: SweepMode = args.mode.unwrap_or(ModeArg::Full).into();
    let r = match mode {
        SweepMode::Full => prob.solve(req),
        SweepMode::SwapFree => prob.solve_swap_free(req, &[]),
    };
    let cell = SweepCell::from_result(&inp.net, &r);
    let out = OpfOutput {
        dp_kw,
        dq_kvar,
        mode: mode.as_str(),
        status: r.status.as_str(),
        cost_usd: r.cost,
        interface_err_kva: base.pu_to_kw(r.interface_error),
        restarts: r.restarts_used,
        vmin_pu: cell.vmin.map(|m| m.v),
        vmin_bus: cell.vmin.map(|m| m.bus),
        units: inp
            .units
            .iter()
            .zip(&r.dispatch.units)
            .map(|(u, d)| OpfUnit {
                name: u.name.clone(),
                bus: u.bus,
                p_kw: base.pu_to_kw(d.p),
                q_kvar: base.pu_to_kw(d.q),
                dp_kw: base.pu_to_kw(d.dp()),
                dq_kvar: base.pu_to_kw(d.dq()),
                p_up_kw: base.pu_to_kw(d.p_up),
                p_dn_kw: base.pu_to_kw(d.p_dn),
                q_up_kvar: base.pu_to_kw(d.q_up),
                q_dn_kvar: base.pu_to_kw(d.q_dn),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&out).expect("serialisable");
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        let path = dir.join("opf.json");
        fs::write(&path, format!("{text}\n")).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
    }
    println!("{text}");
    if r.status == SolveStatus::NotConverged {
        return Err(Failure::Numerical(format!(
            "solver did not converge for request ({dp_kw}, {dq_kvar})"
        )));
    }
    Ok(())
}

fn grid_spec(
    args: &SweepArgs,
    net: &RadialNetwork,
    units: &[FlexUnit],
) -> Result<GridSpec, Failure> {
    let base = net.base();
    let step_kva = args.step_kva.unwrap_or(DEFAULT_STEP_KVA);
    let step = base.kw_to_pu(step_kva);
    let usage = |e: flexmap_core::sweep::GridError| Failure::Usage(format!("grid: {e}"));
    let mut spec =
        GridSpec::around_capability(units, step, args.pad_steps.unwrap_or(0)).map_err(usage)?;
    if let Some(KwRange(lo, hi)) = args.dp_range {
        spec.dp_min = base.kw_to_pu(lo);
        spec.dp_max = base.kw_to_pu(hi);
    }
    if let Some(KwRange(lo, hi)) = args.dq_range {
        spec.dq_min = base.kw_to_pu(lo);
        spec.dq_max = base.kw_to_pu(hi);
    }
    spec.validate().map_err(usage)?;
    Ok(spec)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Debug, Serialize)]
struct SweepLine<'a> {
    command: &'static str,
    csv: &'a str,
    mode: &'static str,
    #[serde(flatten)]
    summary: SweepSummary,
    solved: usize,
    resumed: usize,
    seconds: f64,
}

/// Output CSV name of a sweep.
pub fn sweep_file_name(mode: SweepMode) -> String {
    format!("sweep_{}.csv", mode.as_str())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let args = with_config(args.clone(), args.config.as_deref())?;
    let inp = load_inputs(&args.input, true)?;
    let opts = args.solver.options();
    let prob = FlexProblem::new(&inp.net, &inp.units, opts).map_err(problem_failure)?;
    let spec = grid_spec(&args, &inp.net, &inp.units)?;
    let mode: SweepMode = args.mode.unwrap_or(ModeArg::Full).into();
    let dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    create_dir(&dir)?;
    let csv_path = dir.join(sweep_file_name(mode));
    let mut meta = SweepMeta::new(
        &inp.net,
        &inp.units,
        spec,
        mode,
        &opts,
        inp.net_file.clone(),
        inp.units_file.clone(),
        unix_now(),
    );
    let names = meta.unit_names();
    let base = inp.net.base();

    let resume = args.resume && csv_path.exists() && meta_path(&csv_path).exists();
    let mut records: Vec<Option<Vec<String>>> = vec![None; spec.len()];
    let mut cells: Vec<Option<SweepCell>> = vec![None; spec.len()];
    let mut resumed = 0;
    if resume {
        let old = read_meta(&csv_path)?;
        if !old.same_job(&meta) {
            return Err(Failure::Usage(format!(
                "{}: existing sweep was run with different inputs, grid or options",
                csv_path.display()
            )));
        }
        for (k, (cell, rec)) in read_records(&csv_path, &old, true)? {
            records[k] = Some(rec);
            cells[k] = Some(cell);
            resumed += 1;
        }
    }
    write_meta(&csv_path, &meta)?;
    let mut writer = SweepWriter::open(&csv_path, &names, resume)?;
    let todo: Vec<usize> = (0..spec.len()).filter(|&k| cells[k].is_none()).collect();
    let pool = thread_pool(args.workers.unwrap_or(0)).map_err(|e| Failure::Usage(e.to_string()))?;
    let chunk = spec.counts().0.max(pool.current_num_threads());
    let start = Instant::now();
    let mut done = 0usize;
    for batch in todo.chunks(chunk) {
        let solved = solve_cells(&pool, &prob, &spec, mode, batch);
        writer.write_batch(&spec, base, batch.iter().copied().zip(&solved))?;
        for (&k, c) in batch.iter().zip(solved) {
            records[k] = Some(cell_record(&spec, base, k, &c));
            cells[k] = Some(c);
        }
        done += batch.len();
        let secs = start.elapsed().as_secs_f64();
        let rate = done as f64 / secs.max(1e-9);
        eprintln!(
            "sweep: {}/{} cells, {:.1} cells/s, eta {:.0} s",
            resumed + done,
            spec.len(),
            rate,
            (todo.len() - done) as f64 / rate.max(1e-9)
        );
    }
    drop(writer);
    let records: Vec<Vec<String>> = records
        .into_iter()
        .map(|r| r.expect("every cell solved"))
        .collect();
    let cells: Vec<SweepCell> = cells
        .into_iter()
        .map(|c| c.expect("every cell solved"))
        .collect();
    write_records(&csv_path, &names, &records)?;
    let summary = SweepSummary::of(&cells);
    meta.summary = Some(summary);
    write_meta(&csv_path, &meta)?;
    let line = SweepLine {
        command: "sweep",
        csv: &csv_path.display().to_string(),
        mode: mode.as_str(),
        summary,
        solved: done,
        resumed,
        seconds: start.elapsed().as_secs_f64(),
    };
    println!("{}", serde_json::to_string(&line).expect("serialisable"));
    Ok(())
}

type Loaded = (flexmap_core::sweep::SweepResult, SweepMeta);

fn load_pair(
    main: Option<&Path>,
    swap_free: Option<&Path>,
) -> Result<(Loaded, Option<Loaded>), Failure> {
    let main = main.ok_or_else(|| Failure::Usage("--sweep is required".into()))?;
    let a = load_sweep(main)?;
    let b = match swap_free {
        Some(p) => {
            let b = load_sweep(p)?;
            if !same_grid(&a.1, &b.1) {
                return Err(Failure::Data(format!(
                    "{} and {} use different grids or units",
                    main.display(),
                    p.display()
                )));
            }
            Some(b)
        }
        None => None,
    };
    Ok((a, b))
}

fn cmd_render(args: RenderArgs) -> Result<(), Failure> {
    let args = with_config(args.clone(), args.config.as_deref())?;
    let ((sweep, meta), sf) = load_pair(args.sweep.as_deref(), args.swap_free.as_deref())?;
    let names = meta.unit_names();
    let fig = Figure {
        sweep: &sweep,
        unit_names: &names,
        base: meta
            .base()
            .ok_or_else(|| Failure::Data("invalid base".into()))?,
        swap_free: sf.as_ref().map(|(s, _)| s),
    };
    let dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    create_dir(&dir)?;
    let opts = RenderOptions {
        scale_kw: args.scale_kw,
        cell_px: args.cell_px,
    };
    if matches!(opts.scale_kw, Some(s) if !(s > 0.0 && s.is_finite())) {
        return Err(Failure::Usage("--scale-kw must be positive".into()));
    }
    let files = render_files(&fig, &opts, &dir)?;
    let files: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    println!(
        "{}",
        serde_json::json!({ "command": "render", "files": files })
    );
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let args = with_config(args.clone(), args.config.as_deref())?;
    let ((sweep, meta), sf) = load_pair(args.sweep.as_deref(), args.swap_free.as_deref())?;
    let st = args.swap_threshold_kw.unwrap_or(DEFAULT_SWAP_THRESHOLD_KW);
    let jt = args.jump_threshold_kw.unwrap_or(DEFAULT_JUMP_THRESHOLD_KW);
    if !(st >= 0.0 && jt >= 0.0) {
        return Err(Failure::Usage("thresholds must be non-negative".into()));
    }
    let report = build_report(&sweep, &meta, sf.as_ref().map(|(s, _)| s), st, jt);
    let dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    create_dir(&dir)?;
    write_report(&dir, &report)?;
    let mut line = serde_json::json!({
        "command": "analyze",
        "optimal_cells": report.sweep.optimal_cells,
        "nonconvexity_gap": report.sweep.nonconvexity_gap,
        "swap_cells": report.sweep.swap_cells.len(),
        "shift_hotspots": report.sweep.shift_hotspots.len(),
    });
    if let (Some(s), Some(c)) = (&report.swap_free, &report.comparison) {
        line["swap_free_nonconvexity_gap"] = s.nonconvexity_gap.into();
        line["swap_free_subset"] = c.subset.into();
    }
    println!("{line}");
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Pf(a) => cmd_pf(a),
        Command::Opf(a) => cmd_opf(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Render(a) => cmd_render(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("flexmap: error: {f}");
            f.exit_code()
        }
    }
}
