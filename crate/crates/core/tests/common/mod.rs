//! Shared fixtures and an independent power-flow oracle for integration tests.
#![allow(dead_code)]

use flexmap_core::flexopf::{Dispatch, SolveStatus, UnitDispatch};
use flexmap_core::net::{Bus, BusId, FlexUnit, Line, PerUnitBase, RadialNetwork};
use flexmap_core::sweep::{GridSpec, SweepCell, SweepMetadata, SweepMode, SweepResult};

/// 1 kW in p.u. at the 10 MVA test base.
pub const KW: f64 = 1e-4;

pub fn base() -> PerUnitBase {
    PerUnitBase::new(10.0, 12.66).unwrap()
}

pub fn bus(id: BusId, load_p: f64, load_q: f64) -> Bus {
    Bus {
        id,
        load_p,
        load_q,
        v_min: 0.81,
        v_max: 1.21,
    }
}

pub fn line(from_bus: BusId, to_bus: BusId, r: f64, x: f64) -> Line {
    Line {
        from_bus,
        to_bus,
        r,
        x,
        s_max: None,
    }
}

/// Unit with a symmetric box of `cap_kw` in both channels, prices in $/kWh.
pub fn unit(name: &str, bus: BusId, cap_kw: f64, price_p: f64, price_q: f64) -> FlexUnit {
    let b = base();
    let cap = b.kw_to_pu(cap_kw);
    FlexUnit {
        name: name.into(),
        bus,
        p0: 0.0,
        q0: 0.0,
        p_min: -cap,
        p_max: cap,
        q_min: -cap,
        q_max: cap,
        cost_p: b.price_to_pu(price_p),
        cost_q: b.price_to_pu(price_q),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct C {
    re: f64,
    im: f64,
}

impl C {
    fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }
    fn add(self, o: C) -> C {
        C::new(self.re + o.re, self.im + o.im)
    }
    fn sub(self, o: C) -> C {
        C::new(self.re - o.re, self.im - o.im)
    }
    fn mul(self, o: C) -> C {
        C::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
    fn conj(self) -> C {
        C::new(self.re, -self.im)
    }
    fn div(self, o: C) -> C {
        let d = o.re * o.re + o.im * o.im;
        let n = self.mul(o.conj());
        C::new(n.re / d, n.im / d)
    }
    fn norm2(self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

/// Result of the oracle power flow.
#[derive(Debug, Clone)]
pub struct OracleState {
    /// Squared voltage magnitude per bus, in the order of `buses`.
    pub v: Vec<f64>,
    /// Sending-end complex power per line, in the order of `lines`.
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    pub interface_p: f64,
    pub interface_q: f64,
    pub losses_p: f64,
}

/// Backward/forward sweep on complex voltages and branch currents. Consumption
/// at bus `k` is `load + extra[k]`. Returns `None` if it does not converge.
pub fn oracle_power_flow(
    buses: &[Bus],
    lines: &[Line],
    slack: BusId,
    slack_v: f64,
    extra: &[(f64, f64)],
) -> Option<OracleState> {
    let n = buses.len();
    let pos = |id: BusId| buses.iter().position(|b| b.id == id).unwrap();
    let root = pos(slack);
    // Tree from the slack by repeated relaxation over the line list.
    let mut parent_line = vec![usize::MAX; n];
    let mut order = vec![root];
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut k = 0;
    while k < order.len() {
        let i = order[k];
        for (l, ln) in lines.iter().enumerate() {
            let (a, b) = (pos(ln.from_bus), pos(ln.to_bus));
            let other = if a == i {
                b
            } else if b == i {
                a
            } else {
                continue;
            };
            if !seen[other] {
                seen[other] = true;
                parent_line[other] = l;
                order.push(other);
            }
        }
        k += 1;
    }
    let upstream = |j: usize| {
        let ln = &lines[parent_line[j]];
        let (a, b) = (pos(ln.from_bus), pos(ln.to_bus));
        if a == j {
            b
        } else {
            a
        }
    };
    let s_load: Vec<C> = (0..n)
        .map(|k| C::new(buses[k].load_p + extra[k].0, buses[k].load_q + extra[k].1))
        .collect();
    let v0 = C::new(slack_v.sqrt(), 0.0);
    let mut volt = vec![v0; n];
    let mut branch = vec![C::new(0.0, 0.0); n];
    for _ in 0..500 {
        for &j in order.iter().rev() {
            let mut i_sum = s_load[j].div(volt[j]).conj();
            for &c in &order {
                if c != root && upstream(c) == j {
                    i_sum = i_sum.add(branch[c]);
                }
            }
            branch[j] = i_sum;
        }
        let mut delta = 0.0f64;
        for &j in &order[1..] {
            let ln = &lines[parent_line[j]];
            let z = C::new(ln.r, ln.x);
            let new = volt[upstream(j)].sub(z.mul(branch[j]));
            delta = delta.max(new.sub(volt[j]).norm2().sqrt());
            volt[j] = new;
        }
        if !delta.is_finite() {
            return None;
        }
        if delta < 1e-14 {
            let mut p_flow = vec![0.0; lines.len()];
            let mut q_flow = vec![0.0; lines.len()];
            let mut losses_p = 0.0;
            for &j in &order[1..] {
                let l = parent_line[j];
                let s = volt[upstream(j)].mul(branch[j].conj());
                p_flow[l] = s.re;
                q_flow[l] = s.im;
                losses_p += lines[l].r * branch[j].norm2();
            }
            let s_if = v0.mul(branch[root].conj());
            return Some(OracleState {
                v: volt.iter().map(|v| v.norm2()).collect(),
                p_flow,
                q_flow,
                interface_p: s_if.re,
                interface_q: s_if.im,
                losses_p,
            });
        }
    }
    None
}

/// Convenience wrapper taking per-unit consumptions at unit buses.
pub fn oracle_with_units(
    net: &RadialNetwork,
    units: &[FlexUnit],
    setpoints: &[(f64, f64)],
) -> Option<OracleState> {
    let mut extra = vec![(0.0, 0.0); net.bus_count()];
    for (u, &(p, q)) in units.iter().zip(setpoints) {
        let k = net.position(u.bus).unwrap();
        extra[k].0 += p;
        extra[k].1 += q;
    }
    oracle_power_flow(
        net.buses(),
        net.lines(),
        net.slack_bus(),
        net.slack_v(),
        &extra,
    )
}

/// Two buses joined by one line; the unit-free load sits at bus 2.
pub fn two_bus(r: f64, x: f64, load_p: f64, load_q: f64) -> RadialNetwork {
    RadialNetwork::new(
        vec![bus(1, 0.0, 0.0), bus(2, load_p, load_q)],
        vec![line(1, 2, r, x)],
        1,
        base(),
        1.0,
    )
    .unwrap()
}

/// Five-bus feeder with a lateral: 1-2-3-4 and 2-5.
pub fn five_bus() -> RadialNetwork {
    RadialNetwork::new(
        vec![
            bus(1, 0.0, 0.0),
            bus(2, 0.02, 0.01),
            bus(3, 0.05, 0.02),
            bus(4, 0.08, 0.05),
            bus(5, 0.04, 0.03),
        ],
        vec![
            line(1, 2, 0.02, 0.015),
            line(2, 3, 0.03, 0.02),
            line(3, 4, 0.04, 0.03),
            line(2, 5, 0.05, 0.02),
        ],
        1,
        base(),
        1.0,
    )
    .unwrap()
}

/// Four-bus feeder with a lateral: 1-2-3 and 2-4.
pub fn four_bus() -> RadialNetwork {
    RadialNetwork::new(
        vec![
            bus(1, 0.0, 0.0),
            bus(2, 0.03, 0.015),
            bus(3, 0.09, 0.05),
            bus(4, 0.05, 0.03),
        ],
        vec![
            line(1, 2, 0.02, 0.015),
            line(2, 3, 0.05, 0.035),
            line(2, 4, 0.04, 0.02),
        ],
        1,
        base(),
        1.0,
    )
    .unwrap()
}

/// Copy of `net` whose lower voltage limit at `bus` sits `margin` (p.u.²)
/// below its unregulated value.
pub fn tight_bus(net: &RadialNetwork, bus: BusId, margin: f64) -> RadialNetwork {
    let no_units = vec![(0.0, 0.0); net.bus_count()];
    let st = oracle_power_flow(
        net.buses(),
        net.lines(),
        net.slack_bus(),
        net.slack_v(),
        &no_units,
    )
    .unwrap();
    let k = net.position(bus).unwrap();
    let buses: Vec<Bus> = net
        .buses()
        .iter()
        .enumerate()
        .map(|(i, b)| Bus {
            v_min: if i == k { st.v[k] - margin } else { b.v_min },
            ..b.clone()
        })
        .collect();
    RadialNetwork::new(
        buses,
        net.lines().to_vec(),
        net.slack_bus(),
        net.base(),
        net.slack_v(),
    )
    .unwrap()
}

fn voltages_ok(net: &RadialNetwork, o: &OracleState, tol: f64) -> bool {
    net.buses()
        .iter()
        .zip(&o.v)
        .all(|(b, &v)| v >= b.v_min - tol && v <= b.v_max + tol)
}

fn regulation_cost(u: &FlexUnit, p: f64, q: f64) -> f64 {
    u.cost_p * (p - u.p0).abs() + u.cost_q * (q - u.q0).abs()
}

/// Cheapest setpoint of a single unit on a 1 kW grid over its whole box
/// whose interface lies within `if_tol` of `target` and whose voltages are
/// within limits (up to `v_tol`). Infinite when no grid point qualifies.
pub fn one_unit_oracle(
    net: &RadialNetwork,
    u: &FlexUnit,
    target: (f64, f64),
    if_tol: f64,
    v_tol: f64,
) -> f64 {
    let units = [u.clone()];
    let lo = |x: f64| (x / KW).ceil() as i64;
    let hi = |x: f64| (x / KW).floor() as i64;
    let mut best = f64::INFINITY;
    for i in lo(u.p_min)..=hi(u.p_max) {
        for j in lo(u.q_min)..=hi(u.q_max) {
            let (p, q) = (i as f64 * KW, j as f64 * KW);
            let c = regulation_cost(u, p, q);
            if c >= best {
                continue;
            }
            let Some(o) = oracle_with_units(net, &units, &[(p, q)]) else {
                continue;
            };
            if (o.interface_p - target.0).abs() <= if_tol
                && (o.interface_q - target.1).abs() <= if_tol
                && voltages_ok(net, &o, v_tol)
            {
                best = c;
            }
        }
    }
    best
}

/// Cheapest dispatch of two units: the first is enumerated on a 1 kW grid
/// (in order of its own cost, stopping once that alone exceeds the best), the
/// second is solved exactly for the interface target by fixed-point
/// iteration on the oracle power flow.
pub fn two_unit_oracle(
    net: &RadialNetwork,
    units: &[FlexUnit],
    target: (f64, f64),
    v_tol: f64,
) -> f64 {
    let (u0, u1) = (&units[0], &units[1]);
    let lo = |x: f64| (x / KW).ceil() as i64;
    let hi = |x: f64| (x / KW).floor() as i64;
    let mut grid: Vec<(f64, f64, f64)> = Vec::new();
    for i in lo(u0.p_min)..=hi(u0.p_max) {
        for j in lo(u0.q_min)..=hi(u0.q_max) {
            let (p, q) = (i as f64 * KW, j as f64 * KW);
            grid.push((regulation_cost(u0, p, q), p, q));
        }
    }
    grid.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = f64::INFINITY;
    for (c0, p0, q0) in grid {
        if c0 >= best {
            break;
        }
        let (mut p1, mut q1) = (u1.p0, u1.q0);
        let mut state = None;
        for _ in 0..60 {
            let Some(o) = oracle_with_units(net, units, &[(p0, q0), (p1, q1)]) else {
                break;
            };
            let (ep, eq) = (o.interface_p - target.0, o.interface_q - target.1);
            if ep.abs() < 1e-13 && eq.abs() < 1e-13 {
                state = Some(o);
                break;
            }
            p1 -= ep;
            q1 -= eq;
        }
        let Some(o) = state else { continue };
        if p1 < u1.p_min || p1 > u1.p_max || q1 < u1.q_min || q1 > u1.q_max {
            continue;
        }
        if voltages_ok(net, &o, v_tol) {
            best = best.min(c0 + regulation_cost(u1, p1, q1));
        }
    }
    best
}

/// Sweep over an `nx × ny` grid with unit step whose cell `(i, j)` is optimal
/// with the given per-unit regulations `(dp, dq)` when `f` returns `Some`.
pub fn synthetic_sweep(
    nx: usize,
    ny: usize,
    units: usize,
    f: impl Fn(usize, usize) -> Option<Vec<(f64, f64)>>,
) -> SweepResult {
    let spec = GridSpec::new(0.0, (nx - 1) as f64, 0.0, (ny - 1) as f64, 1.0).unwrap();
    let mut cells = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (status, regs) = match f(i, j) {
                Some(r) => (SolveStatus::Optimal, r),
                None => (SolveStatus::Infeasible, vec![(0.0, 0.0); units]),
            };
            let dispatch = Dispatch {
                units: regs
                    .iter()
                    .map(|&(p, q)| UnitDispatch {
                        p,
                        q,
                        p_up: p.max(0.0),
                        p_dn: (-p).max(0.0),
                        q_up: q.max(0.0),
                        q_dn: (-q).max(0.0),
                    })
                    .collect(),
            };
            cells.push(SweepCell {
                status,
                dispatch,
                cost: 0.0,
                interface_error: 0.0,
                restarts_used: 0,
                vmin: None,
            });
        }
    }
    SweepResult {
        spec,
        mode: SweepMode::Full,
        cells,
        metadata: SweepMetadata::default(),
    }
}
