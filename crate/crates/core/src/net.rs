//! Radial network and flexible-unit data model.
//!
//! All quantities held here are per-unit on the network's `(base_mva, base_kv)`
//! pair. Voltages are stored squared (`v = |V|²`), matching the branch-flow
//! formulation used by [`crate::distflow`]. Unit prices are stored as dollars
//! per hour per p.u. of regulated power so that costs can be evaluated without
//! carrying the base around.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

/// External bus identifier as it appears in data files.
pub type BusId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    /// Active load, p.u.
    pub load_p: f64,
    /// Reactive load, p.u.
    pub load_q: f64,
    /// Lower squared-voltage bound, p.u.².
    pub v_min: f64,
    /// Upper squared-voltage bound, p.u.².
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from_bus: BusId,
    pub to_bus: BusId,
    /// Series resistance, p.u.
    pub r: f64,
    /// Series reactance, p.u.
    pub x: f64,
    /// Apparent-power limit, p.u. `None` means unbounded.
    pub s_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("bus {id}: {reason}")]
    InvalidBus { id: BusId, reason: &'static str },
    #[error("duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("line {index} ({from}-{to}): {reason}")]
    InvalidLine {
        index: usize,
        from: BusId,
        to: BusId,
        reason: &'static str,
    },
    #[error("line {index} references unknown bus {bus}")]
    UnknownBus { index: usize, bus: BusId },
    #[error("slack bus {0} does not exist")]
    MissingSlack(BusId),
    #[error("network is not radial: {lines} lines for {buses} buses (a tree needs buses - 1)")]
    NotRadial { lines: usize, buses: usize },
    #[error("network is not radial: bus {0} is not connected to the slack bus")]
    Disconnected(BusId),
    #[error("invalid base: {0}")]
    InvalidBase(&'static str),
    #[error("network has no buses")]
    Empty,
}

/// Conversion between engineering units and per-unit values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerUnitBase {
    pub base_mva: f64,
    pub base_kv: f64,
}

impl PerUnitBase {
    pub fn new(base_mva: f64, base_kv: f64) -> Result<Self, NetworkError> {
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(NetworkError::InvalidBase("base_mva must be positive"));
        }
        if !(base_kv.is_finite() && base_kv > 0.0) {
            return Err(NetworkError::InvalidBase("base_kv must be positive"));
        }
        Ok(Self { base_mva, base_kv })
    }

    /// Power base in kVA.
    pub fn base_kva(&self) -> f64 {
        self.base_mva * 1000.0
    }

    /// Impedance base in ohms.
    pub fn base_ohm(&self) -> f64 {
        self.base_kv * self.base_kv / self.base_mva
    }

    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / self.base_kva()
    }

    pub fn pu_to_kw(&self, pu: f64) -> f64 {
        pu * self.base_kva()
    }

    pub fn ohm_to_pu(&self, ohm: f64) -> f64 {
        ohm / self.base_ohm()
    }

    pub fn pu_to_ohm(&self, pu: f64) -> f64 {
        pu * self.base_ohm()
    }

    /// `$/kWh` price to `$/h` per p.u. of power.
    pub fn price_to_pu(&self, usd_per_kwh: f64) -> f64 {
        usd_per_kwh * self.base_kva()
    }

    pub fn price_from_pu(&self, usd_per_pu_h: f64) -> f64 {
        usd_per_pu_h / self.base_kva()
    }
}

/// Slack-rooted orientation of the tree, computed once at construction.
#[derive(Debug, Clone, PartialEq)]
struct Topology {
    /// Bus positions in breadth-first order from the slack; `order[0]` is the slack.
    order: Vec<usize>,
    /// Parent bus position, `usize::MAX` for the slack.
    parent: Vec<usize>,
    /// Line index connecting a bus to its parent, `usize::MAX` for the slack.
    parent_line: Vec<usize>,
    /// Downstream bus position of every line.
    line_child: Vec<usize>,
    /// Upstream bus position of every line.
    line_parent: Vec<usize>,
    children_start: Vec<usize>,
    children: Vec<usize>,
}

/// An immutable radial distribution network.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialNetwork {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    slack_bus: BusId,
    base: PerUnitBase,
    slack_v: f64,
    index: BTreeMap<BusId, usize>,
    slack_pos: usize,
    topo: Topology,
}

impl RadialNetwork {
    /// Validates the data and builds the slack-rooted tree.
    pub fn new(
        buses: Vec<Bus>,
        lines: Vec<Line>,
        slack_bus: BusId,
        base: PerUnitBase,
        slack_v: f64,
    ) -> Result<Self, NetworkError> {
        if buses.is_empty() {
            return Err(NetworkError::Empty);
        }
        let mut index = BTreeMap::new();
        for (pos, bus) in buses.iter().enumerate() {
            validate_bus(bus)?;
            if index.insert(bus.id, pos).is_some() {
                return Err(NetworkError::DuplicateBus(bus.id));
            }
        }
        let slack_pos = *index
            .get(&slack_bus)
            .ok_or(NetworkError::MissingSlack(slack_bus))?;
        if !(slack_v.is_finite() && slack_v > 0.0) {
            return Err(NetworkError::InvalidBus {
                id: slack_bus,
                reason: "slack squared voltage must be positive",
            });
        }

        let mut ends = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            validate_line(i, line)?;
            let a = *index.get(&line.from_bus).ok_or(NetworkError::UnknownBus {
                index: i,
                bus: line.from_bus,
            })?;
            let b = *index.get(&line.to_bus).ok_or(NetworkError::UnknownBus {
                index: i,
                bus: line.to_bus,
            })?;
            if a == b {
                return Err(NetworkError::InvalidLine {
                    index: i,
                    from: line.from_bus,
                    to: line.to_bus,
                    reason: "self loop",
                });
            }
            ends.push((a, b));
        }
        if lines.len() + 1 != buses.len() {
            return Err(NetworkError::NotRadial {
                lines: lines.len(),
                buses: buses.len(),
            });
        }

        let topo = build_topology(buses.len(), &ends, slack_pos)
            .map_err(|pos| NetworkError::Disconnected(buses[pos].id))?;

        Ok(Self {
            buses,
            lines,
            slack_bus,
            base,
            slack_v,
            index,
            slack_pos,
            topo,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn slack_bus(&self) -> BusId {
        self.slack_bus
    }

    pub fn base(&self) -> PerUnitBase {
        self.base
    }

    pub fn base_mva(&self) -> f64 {
        self.base.base_mva
    }

    pub fn base_kv(&self) -> f64 {
        self.base.base_kv
    }

    /// Slack squared voltage, p.u.².
    pub fn slack_v(&self) -> f64 {
        self.slack_v
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    /// Position of a bus id in [`Self::buses`].
    pub fn position(&self, id: BusId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn slack_position(&self) -> usize {
        self.slack_pos
    }

    /// Bus positions in breadth-first order from the slack.
    pub fn order(&self) -> &[usize] {
        &self.topo.order
    }

    /// Parent bus position of `pos`, `None` for the slack.
    pub fn parent(&self, pos: usize) -> Option<usize> {
        let p = self.topo.parent[pos];
        (p != usize::MAX).then_some(p)
    }

    /// Index of the line feeding `pos` from upstream, `None` for the slack.
    pub fn parent_line(&self, pos: usize) -> Option<usize> {
        let l = self.topo.parent_line[pos];
        (l != usize::MAX).then_some(l)
    }

    /// Downstream bus positions of `pos`.
    pub fn children(&self, pos: usize) -> &[usize] {
        &self.topo.children[self.topo.children_start[pos]..self.topo.children_start[pos + 1]]
    }

    /// Upstream (sending-end) bus position of a line.
    pub fn line_upstream(&self, line: usize) -> usize {
        self.topo.line_parent[line]
    }

    /// Downstream (receiving-end) bus position of a line.
    pub fn line_downstream(&self, line: usize) -> usize {
        self.topo.line_child[line]
    }

    /// Returns a copy with every bus's squared-voltage band replaced.
    pub fn with_voltage_band(&self, v_min: f64, v_max: f64) -> Result<Self, NetworkError> {
        let buses = self
            .buses
            .iter()
            .map(|b| Bus {
                v_min,
                v_max,
                ..b.clone()
            })
            .collect();
        Self::new(
            buses,
            self.lines.clone(),
            self.slack_bus,
            self.base,
            self.slack_v,
        )
    }
}

fn validate_bus(bus: &Bus) -> Result<(), NetworkError> {
    let bad = |reason| NetworkError::InvalidBus { id: bus.id, reason };
    if !(bus.load_p.is_finite() && bus.load_q.is_finite()) {
        return Err(bad("load must be finite"));
    }
    if !(bus.v_min.is_finite() && bus.v_max.is_finite()) {
        return Err(bad("voltage bounds must be finite"));
    }
    if !(bus.v_min > 0.0 && bus.v_min < bus.v_max) {
        return Err(bad("voltage bounds must satisfy 0 < v_min < v_max"));
    }
    Ok(())
}

fn validate_line(index: usize, line: &Line) -> Result<(), NetworkError> {
    let bad = |reason| NetworkError::InvalidLine {
        index,
        from: line.from_bus,
        to: line.to_bus,
        reason,
    };
    if !(line.r.is_finite() && line.x.is_finite()) {
        return Err(bad("impedance must be finite"));
    }
    if line.r < 0.0 || line.x < 0.0 {
        return Err(bad("r and x must be non-negative"));
    }
    if line.r == 0.0 && line.x == 0.0 {
        return Err(bad("r and x are both zero"));
    }
    if let Some(s) = line.s_max {
        if !(s.is_finite() && s > 0.0) {
            return Err(bad("s_max must be positive"));
        }
    }
    Ok(())
}

/// Breadth-first orientation from the slack. Returns the position of the first
/// unreachable bus on failure.
fn build_topology(n: usize, ends: &[(usize, usize)], root: usize) -> Result<Topology, usize> {
    let mut adj_start = vec![0usize; n + 1];
    for &(a, b) in ends {
        adj_start[a + 1] += 1;
        adj_start[b + 1] += 1;
    }
    for i in 0..n {
        adj_start[i + 1] += adj_start[i];
    }
    let mut fill = adj_start.clone();
    let mut adj = vec![(0usize, 0usize); 2 * ends.len()];
    for (l, &(a, b)) in ends.iter().enumerate() {
        adj[fill[a]] = (b, l);
        fill[a] += 1;
        adj[fill[b]] = (a, l);
        fill[b] += 1;
    }

    let mut parent = vec![usize::MAX; n];
    let mut parent_line = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    seen[root] = true;
    order.push(root);
    let mut head = 0;
    while head < order.len() {
        let u = order[head];
        head += 1;
        for &(w, l) in &adj[adj_start[u]..adj_start[u + 1]] {
            if !seen[w] {
                seen[w] = true;
                parent[w] = u;
                parent_line[w] = l;
                order.push(w);
            }
        }
    }
    if let Some(pos) = seen.iter().position(|s| !s) {
        return Err(pos);
    }

    let mut line_child = vec![0; ends.len()];
    let mut line_parent = vec![0; ends.len()];
    let mut children_start = vec![0usize; n + 1];
    for pos in 0..n {
        if parent[pos] != usize::MAX {
            line_child[parent_line[pos]] = pos;
            line_parent[parent_line[pos]] = parent[pos];
            children_start[parent[pos] + 1] += 1;
        }
    }
    for i in 0..n {
        children_start[i + 1] += children_start[i];
    }
    let mut fill = children_start.clone();
    let mut children = vec![0; n.saturating_sub(1)];
    // BFS order keeps children lists deterministic.
    for &pos in &order[1..] {
        let p = parent[pos];
        children[fill[p]] = pos;
        fill[p] += 1;
    }

    Ok(Topology {
        order,
        parent,
        parent_line,
        line_child,
        line_parent,
        children_start,
        children,
    })
}

/// A controllable P-Q resource with a box capability and linear prices.
///
/// Positive `p`/`q` means consumption. Prices are `$/h` per p.u. and apply
/// symmetrically to upward and downward regulation.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexUnit {
    pub name: String,
    pub bus: BusId,
    pub p0: f64,
    pub q0: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost_p: f64,
    pub cost_q: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UnitError {
    #[error("unit {name}: unknown bus {bus}")]
    UnknownBus { name: String, bus: BusId },
    #[error("unit {name}: inverted {channel} box (min > max)")]
    InvertedBox { name: String, channel: &'static str },
    #[error("unit {name}: initial {channel} setpoint outside its box")]
    InitialOutsideBox { name: String, channel: &'static str },
    #[error("unit {name}: {channel} price must be positive and finite")]
    InvalidPrice { name: String, channel: &'static str },
    #[error("unit {name}: non-finite value")]
    NonFinite { name: String },
}

impl FlexUnit {
    pub fn validate(&self, net: &RadialNetwork) -> Result<(), UnitError> {
        let name = || self.name.clone();
        let vals = [
            self.p0,
            self.q0,
            self.p_min,
            self.p_max,
            self.q_min,
            self.q_max,
            self.cost_p,
            self.cost_q,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(UnitError::NonFinite { name: name() });
        }
        if net.position(self.bus).is_none() {
            return Err(UnitError::UnknownBus {
                name: name(),
                bus: self.bus,
            });
        }
        if self.p_min > self.p_max {
            return Err(UnitError::InvertedBox {
                name: name(),
                channel: "P",
            });
        }
        if self.q_min > self.q_max {
            return Err(UnitError::InvertedBox {
                name: name(),
                channel: "Q",
            });
        }
        if !(self.p_min <= self.p0 && self.p0 <= self.p_max) {
            return Err(UnitError::InitialOutsideBox {
                name: name(),
                channel: "P",
            });
        }
        if !(self.q_min <= self.q0 && self.q0 <= self.q_max) {
            return Err(UnitError::InitialOutsideBox {
                name: name(),
                channel: "Q",
            });
        }
        if self.cost_p <= 0.0 {
            return Err(UnitError::InvalidPrice {
                name: name(),
                channel: "P",
            });
        }
        if self.cost_q <= 0.0 {
            return Err(UnitError::InvalidPrice {
                name: name(),
                channel: "Q",
            });
        }
        Ok(())
    }

    /// Width of the active-power box.
    pub fn p_width(&self) -> f64 {
        self.p_max - self.p_min
    }

    pub fn q_width(&self) -> f64 {
        self.q_max - self.q_min
    }
}

/// Validates every unit against `net`.
pub fn validate_units(net: &RadialNetwork, units: &[FlexUnit]) -> Result<(), UnitError> {
    units.iter().try_for_each(|u| u.validate(net))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bus(id: BusId) -> Bus {
        Bus {
            id,
            load_p: 0.01,
            load_q: 0.005,
            v_min: 0.81,
            v_max: 1.21,
        }
    }

    fn line(a: BusId, b: BusId) -> Line {
        Line {
            from_bus: a,
            to_bus: b,
            r: 0.01,
            x: 0.01,
            s_max: None,
        }
    }

    fn base() -> PerUnitBase {
        PerUnitBase::new(10.0, 12.66).unwrap()
    }

    #[test]
    fn two_bus_tree_is_valid() {
        let net =
            RadialNetwork::new(vec![bus(1), bus(2)], vec![line(1, 2)], 1, base(), 1.0).unwrap();
        assert_eq!(net.bus_count(), 2);
        assert_eq!(net.order(), &[0, 1]);
        assert_eq!(net.parent(1), Some(0));
        assert_eq!(net.parent_line(1), Some(0));
        assert_eq!(net.children(0), &[1]);
    }

    #[test]
    fn three_cycle_is_rejected() {
        let err = RadialNetwork::new(
            vec![bus(1), bus(2), bus(3)],
            vec![line(1, 2), line(2, 3), line(3, 1)],
            1,
            base(),
            1.0,
        )
        .unwrap_err();
        assert_eq!(err, NetworkError::NotRadial { lines: 3, buses: 3 });
    }

    #[test]
    fn cycle_with_island_reports_disconnected_bus() {
        // Right line count, but buses 2-3-4 form a cycle and 5 hangs off nothing.
        let err = RadialNetwork::new(
            vec![bus(1), bus(2), bus(3), bus(4), bus(5)],
            vec![line(1, 2), line(2, 3), line(3, 4), line(4, 2)],
            1,
            base(),
            1.0,
        )
        .unwrap_err();
        assert_eq!(err, NetworkError::Disconnected(5));
    }

    #[test]
    fn dangling_reference_names_the_line() {
        let err =
            RadialNetwork::new(vec![bus(1), bus(2)], vec![line(1, 7)], 1, base(), 1.0).unwrap_err();
        assert_eq!(err, NetworkError::UnknownBus { index: 0, bus: 7 });
    }

    #[test]
    fn reversed_lines_are_oriented_from_the_slack() {
        let net = RadialNetwork::new(
            vec![bus(3), bus(1), bus(2)],
            vec![line(2, 1), line(3, 2)],
            1,
            base(),
            1.0,
        )
        .unwrap();
        let p1 = net.position(1).unwrap();
        let p2 = net.position(2).unwrap();
        let p3 = net.position(3).unwrap();
        assert_eq!(net.line_upstream(0), p1);
        assert_eq!(net.line_downstream(0), p2);
        assert_eq!(net.line_upstream(1), p2);
        assert_eq!(net.parent(p3), Some(p2));
    }

    #[test]
    fn bus_and_line_invariants() {
        let mut b = bus(1);
        b.v_min = 1.3;
        assert!(matches!(
            RadialNetwork::new(vec![b], vec![], 1, base(), 1.0),
            Err(NetworkError::InvalidBus { id: 1, .. })
        ));
        let mut l = line(1, 2);
        l.r = 0.0;
        l.x = 0.0;
        assert!(matches!(
            RadialNetwork::new(vec![bus(1), bus(2)], vec![l], 1, base(), 1.0),
            Err(NetworkError::InvalidLine { index: 0, .. })
        ));
        assert_eq!(
            RadialNetwork::new(vec![bus(1)], vec![], 9, base(), 1.0).unwrap_err(),
            NetworkError::MissingSlack(9)
        );
    }

    #[test]
    fn per_unit_conversion() {
        let b = base();
        assert_eq!(b.kw_to_pu(500.0), 500.0 / 10_000.0);
        assert!((b.base_ohm() - 16.02756).abs() < 1e-9);
        assert_eq!(b.price_to_pu(0.3), 3000.0);
    }

    #[test]
    fn unit_validation() {
        let net =
            RadialNetwork::new(vec![bus(1), bus(2)], vec![line(1, 2)], 1, base(), 1.0).unwrap();
        let mut u = FlexUnit {
            name: "A".into(),
            bus: 2,
            p0: 0.0,
            q0: 0.0,
            p_min: -0.05,
            p_max: 0.05,
            q_min: -0.05,
            q_max: 0.05,
            cost_p: 3000.0,
            cost_q: 1500.0,
        };
        assert!(u.validate(&net).is_ok());
        u.bus = 99;
        assert!(matches!(
            u.validate(&net),
            Err(UnitError::UnknownBus { bus: 99, .. })
        ));
        u.bus = 2;
        u.p_min = 0.1;
        assert!(matches!(
            u.validate(&net),
            Err(UnitError::InvertedBox { channel: "P", .. })
        ));
        u.p_min = -0.05;
        u.cost_q = 0.0;
        assert!(matches!(
            u.validate(&net),
            Err(UnitError::InvalidPrice { channel: "Q", .. })
        ));
        assert!(validate_units(&net, &[]).is_ok());
    }
}
