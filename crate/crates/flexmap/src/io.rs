//! JSON network and unit files.
//!
//! Files use engineering units (kW, kVAr, Ω, $/kWh); everything is converted
//! to per-unit on load and back on save.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use flexmap_core::net::{
    validate_units, Bus, BusId, FlexUnit, Line, NetworkError, PerUnitBase, RadialNetwork, UnitError,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: unsupported format_version {found} (expected {FORMAT_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: {source}")]
    Network { path: PathBuf, source: NetworkError },
    #[error("{path}: {source}")]
    Units { path: PathBuf, source: UnitError },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl DataError {
    pub(crate) fn invalid(path: &Path, message: impl Into<String>) -> Self {
        DataError::Invalid {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

fn default_v_min() -> f64 {
    0.9
}

fn default_v_max() -> f64 {
    1.1
}

fn default_slack_v() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub base_mva: f64,
    pub base_kv: f64,
    pub slack_bus: BusId,
    /// Squared slack voltage, p.u.².
    #[serde(default = "default_slack_v")]
    pub slack_v: f64,
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: BusId,
    pub load_p_kw: f64,
    pub load_q_kvar: f64,
    /// Voltage magnitude limits, p.u. (squared internally).
    #[serde(default = "default_v_min")]
    pub v_min_pu: f64,
    #[serde(default = "default_v_max")]
    pub v_max_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub from: BusId,
    pub to: BusId,
    pub r_ohm: f64,
    pub x_ohm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_max_kva: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitsFile {
    pub format_version: u32,
    pub units: Vec<UnitRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitRecord {
    pub name: String,
    pub bus: BusId,
    pub p0_kw: f64,
    pub q0_kvar: f64,
    pub p_min_kw: f64,
    pub p_max_kw: f64,
    pub q_min_kvar: f64,
    pub q_max_kvar: f64,
    pub cost_p_usd_per_kwh: f64,
    pub cost_q_usd_per_kvarh: f64,
}

pub(crate) fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_network(path: impl AsRef<Path>) -> Result<RadialNetwork, DataError> {
    let path = path.as_ref();
    parse_network(&read(path)?, path)
}

/// Parses a network file; `origin` only labels errors.
pub fn parse_network(text: &str, origin: &Path) -> Result<RadialNetwork, DataError> {
    let file: NetworkFile = serde_json::from_str(text).map_err(|source| DataError::Parse {
        path: origin.to_path_buf(),
        source,
    })?;
    network_from_file(&file).map_err(|source| match source {
        NetworkFileError::Version(found) => DataError::Version {
            path: origin.to_path_buf(),
            found,
        },
        NetworkFileError::Network(source) => DataError::Network {
            path: origin.to_path_buf(),
            source,
        },
    })
}

#[derive(Debug)]
pub enum NetworkFileError {
    Version(u32),
    Network(NetworkError),
}

pub fn network_from_file(file: &NetworkFile) -> Result<RadialNetwork, NetworkFileError> {
    if file.format_version != FORMAT_VERSION {
        return Err(NetworkFileError::Version(file.format_version));
    }
    let base = PerUnitBase::new(file.base_mva, file.base_kv).map_err(NetworkFileError::Network)?;
    let buses = file
        .buses
        .iter()
        .map(|b| Bus {
            id: b.id,
            load_p: base.kw_to_pu(b.load_p_kw),
            load_q: base.kw_to_pu(b.load_q_kvar),
            v_min: b.v_min_pu * b.v_min_pu,
            v_max: b.v_max_pu * b.v_max_pu,
        })
        .collect();
    let lines = file
        .lines
        .iter()
        .map(|l| Line {
            from_bus: l.from,
            to_bus: l.to,
            r: base.ohm_to_pu(l.r_ohm),
            x: base.ohm_to_pu(l.x_ohm),
            s_max: l.s_max_kva.map(|s| base.kw_to_pu(s)),
        })
        .collect();
    RadialNetwork::new(buses, lines, file.slack_bus, base, file.slack_v)
        .map_err(NetworkFileError::Network)
}

pub fn network_to_file(net: &RadialNetwork) -> NetworkFile {
    let base = net.base();
    NetworkFile {
        format_version: FORMAT_VERSION,
        name: None,
        base_mva: base.base_mva,
        base_kv: base.base_kv,
        slack_bus: net.slack_bus(),
        slack_v: net.slack_v(),
        buses: net
            .buses()
            .iter()
            .map(|b| BusRecord {
                id: b.id,
                load_p_kw: base.pu_to_kw(b.load_p),
                load_q_kvar: base.pu_to_kw(b.load_q),
                v_min_pu: b.v_min.sqrt(),
                v_max_pu: b.v_max.sqrt(),
            })
            .collect(),
        lines: net
            .lines()
            .iter()
            .map(|l| LineRecord {
                from: l.from_bus,
                to: l.to_bus,
                r_ohm: base.pu_to_ohm(l.r),
                x_ohm: base.pu_to_ohm(l.x),
                s_max_kva: l.s_max.map(|s| base.pu_to_kw(s)),
            })
            .collect(),
    }
}

pub fn save_network(net: &RadialNetwork, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_json(path.as_ref(), &network_to_file(net))
}

pub fn load_units(path: impl AsRef<Path>, net: &RadialNetwork) -> Result<Vec<FlexUnit>, DataError> {
    let path = path.as_ref();
    parse_units(&read(path)?, path, net)
}

pub fn parse_units(
    text: &str,
    origin: &Path,
    net: &RadialNetwork,
) -> Result<Vec<FlexUnit>, DataError> {
    let file: UnitsFile = serde_json::from_str(text).map_err(|source| DataError::Parse {
        path: origin.to_path_buf(),
        source,
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(DataError::Version {
            path: origin.to_path_buf(),
            found: file.format_version,
        });
    }
    let base = net.base();
    let units: Vec<FlexUnit> = file
        .units
        .iter()
        .map(|u| FlexUnit {
            name: u.name.clone(),
            bus: u.bus,
            p0: base.kw_to_pu(u.p0_kw),
            q0: base.kw_to_pu(u.q0_kvar),
            p_min: base.kw_to_pu(u.p_min_kw),
            p_max: base.kw_to_pu(u.p_max_kw),
            q_min: base.kw_to_pu(u.q_min_kvar),
            q_max: base.kw_to_pu(u.q_max_kvar),
            cost_p: base.price_to_pu(u.cost_p_usd_per_kwh),
            cost_q: base.price_to_pu(u.cost_q_usd_per_kvarh),
        })
        .collect();
    validate_units(net, &units).map_err(|source| DataError::Units {
        path: origin.to_path_buf(),
        source,
    })?;
    Ok(units)
}

pub fn units_to_file(net: &RadialNetwork, units: &[FlexUnit]) -> UnitsFile {
    let base = net.base();
    UnitsFile {
        format_version: FORMAT_VERSION,
        units: units
            .iter()
            .map(|u| UnitRecord {
                name: u.name.clone(),
                bus: u.bus,
                p0_kw: base.pu_to_kw(u.p0),
                q0_kvar: base.pu_to_kw(u.q0),
                p_min_kw: base.pu_to_kw(u.p_min),
                p_max_kw: base.pu_to_kw(u.p_max),
                q_min_kvar: base.pu_to_kw(u.q_min),
                q_max_kvar: base.pu_to_kw(u.q_max),
                cost_p_usd_per_kwh: base.price_from_pu(u.cost_p),
                cost_q_usd_per_kvarh: base.price_from_pu(u.cost_q),
            })
            .collect(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| DataError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Directory holding the bundled data files.
pub fn bundled_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub const IEEE33_JSON: &str = include_str!("../data/ieee33.json");
pub const IEEE33_UNITS_JSON: &str = include_str!("../data/ieee33_units.json");

/// The bundled 33-bus feeder.
pub fn ieee33() -> RadialNetwork {
    parse_network(IEEE33_JSON, Path::new("ieee33.json")).expect("bundled network is valid")
}

/// The bundled four-unit set on the 33-bus feeder.
pub fn ieee33_units(net: &RadialNetwork) -> Vec<FlexUnit> {
    parse_units(IEEE33_UNITS_JSON, Path::new("ieee33_units.json"), net)
        .expect("bundled units are valid")
}
