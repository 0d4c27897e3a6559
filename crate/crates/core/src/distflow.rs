//! Branch-flow (DistFlow) power flow for radial networks.
//!
//! For every line `l` from upstream bus `i` to downstream bus `j` the solved
//! state satisfies
//!
//! ```text
//! P_l = Σ_{c ∈ children(j)} P_c + r_l ℓ_l + load_p(j) + p(j)
//! Q_l = Σ_{c ∈ children(j)} Q_c + x_l ℓ_l + load_q(j) + q(j)
//! ℓ_l v_i = P_l² + Q_l²
//! v_j = v_i − 2 (r_l P_l + x_l Q_l) + (r_l² + x_l²) ℓ_l
//! ```
//!
//! with `v` squared voltage magnitudes and `ℓ` squared current magnitudes.
//! The backward pass solves each line's current exactly from the scalar
//! quadratic given the upstream voltage, so the only fixed-point iteration is
//! through the voltages.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::net::{BusId, RadialNetwork};

/// Controllable consumption at a bus, p.u. (positive = consumption).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub bus: BusId,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfOptions {
    /// Maximum absolute equation residual accepted as converged.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum PfError {
    #[error("power flow did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("voltage collapse on line {line}")]
    VoltageCollapse { line: usize },
    #[error("injection references unknown bus {0}")]
    UnknownBus(BusId),
    #[error("non-finite injection at bus {0}")]
    NonFinite(BusId),
    #[error("state dimensions do not match the network")]
    DimensionMismatch,
    #[error("tolerance must be positive")]
    InvalidTolerance,
}

/// Converged network state. Bus vectors are indexed by bus position, line
/// vectors by line index; line flows are measured at the upstream end.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkState {
    /// Squared voltage magnitudes, p.u.².
    pub v: Vec<f64>,
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    /// Squared current magnitudes, p.u.².
    pub ell: Vec<f64>,
    pub losses_p: f64,
    pub losses_q: f64,
    /// Active power drawn from the upstream grid at the slack bus.
    pub interface_p: f64,
    pub interface_q: f64,
    pub iterations: usize,
}

impl NetworkState {
    pub fn zeros(net: &RadialNetwork) -> Self {
        Self {
            v: vec![net.slack_v(); net.bus_count()],
            p_flow: vec![0.0; net.line_count()],
            q_flow: vec![0.0; net.line_count()],
            ell: vec![0.0; net.line_count()],
            ..Self::default()
        }
    }

    /// Voltage magnitude at a bus position, p.u.
    pub fn voltage_magnitude(&self, pos: usize) -> f64 {
        libm::sqrt(self.v[pos])
    }

    /// Lowest squared voltage and its bus position.
    pub fn min_voltage(&self) -> (usize, f64) {
        self.v
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, v)| if v < acc.1 { (i, v) } else { acc },
            )
    }

    fn matches(&self, net: &RadialNetwork) -> bool {
        self.v.len() == net.bus_count()
            && self.p_flow.len() == net.line_count()
            && self.q_flow.len() == net.line_count()
            && self.ell.len() == net.line_count()
    }
}

/// Dense per-bus injection vectors, indexed by bus position.
pub fn dense_injections(
    net: &RadialNetwork,
    inj: &[Injection],
) -> Result<(Vec<f64>, Vec<f64>), PfError> {
    let mut p = vec![0.0; net.bus_count()];
    let mut q = vec![0.0; net.bus_count()];
    for i in inj {
        let pos = net.position(i.bus).ok_or(PfError::UnknownBus(i.bus))?;
        if !(i.p.is_finite() && i.q.is_finite()) {
            return Err(PfError::NonFinite(i.bus));
        }
        p[pos] += i.p;
        q[pos] += i.q;
    }
    Ok((p, q))
}

/// Solves the DistFlow equations for the given unit injections.
pub fn solve_power_flow(
    net: &RadialNetwork,
    inj: &[Injection],
    opts: &PfOptions,
) -> Result<NetworkState, PfError> {
    let (p, q) = dense_injections(net, inj)?;
    let mut pf = PowerFlow::new(net);
    let mut state = NetworkState::zeros(net);
    pf.solve(net, &p, &q, opts, &mut state)?;
    Ok(state)
}

/// Reusable scratch space for repeated solves on one network.
#[derive(Debug, Clone)]
pub struct PowerFlow {
    sum_p: Vec<f64>,
    sum_q: Vec<f64>,
    adj: Vec<[f64; 12]>,
    t: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl PowerFlow {
    pub fn new(net: &RadialNetwork) -> Self {
        let n = net.bus_count();
        Self {
            sum_p: vec![0.0; n],
            sum_q: vec![0.0; n],
            adj: vec![[0.0; 12]; n],
            t: vec![[0.0; 3]; n],
            alpha: vec![0.0; n],
            beta: vec![0.0; n],
        }
    }

    /// Backward/forward sweep from a flat voltage profile. `p_inj`/`q_inj` are
    /// dense per-position consumptions. On error `state` holds the last iterate.
    pub fn solve(
        &mut self,
        net: &RadialNetwork,
        p_inj: &[f64],
        q_inj: &[f64],
        opts: &PfOptions,
        state: &mut NetworkState,
    ) -> Result<(), PfError> {
        if !(opts.tol > 0.0) {
            return Err(PfError::InvalidTolerance);
        }
        let n = net.bus_count();
        if p_inj.len() != n || q_inj.len() != n {
            return Err(PfError::DimensionMismatch);
        }
        if !state.matches(net) {
            *state = NetworkState::zeros(net);
        }
        state.v.fill(net.slack_v());
        state.ell.fill(0.0);

        let buses = net.buses();
        let lines = net.lines();
        let order = net.order();
        let root = net.slack_position();
        let mut residual = f64::INFINITY;

        for iter in 1..=opts.max_iter.max(1) {
            for pos in 0..n {
                self.sum_p[pos] = buses[pos].load_p + p_inj[pos];
                self.sum_q[pos] = buses[pos].load_q + q_inj[pos];
            }
            for &pos in order[1..].iter().rev() {
                let l = net.parent_line(pos).unwrap_or_default();
                let parent = net.line_upstream(l);
                let line = &lines[l];
                let (sp, sq) = (self.sum_p[pos], self.sum_q[pos]);
                let vi = state.v[parent];
                let a = line.r * line.r + line.x * line.x;
                let b = 2.0 * (line.r * sp + line.x * sq) - vi;
                let c = sp * sp + sq * sq;
                let disc = b * b - 4.0 * a * c;
                let denom = -b + libm::sqrt(disc.max(0.0));
                if disc < 0.0 || !(denom > 0.0) {
                    return Err(PfError::VoltageCollapse { line: l });
                }
                let ell = 2.0 * c / denom;
                let pf = sp + line.r * ell;
                let qf = sq + line.x * ell;
                state.ell[l] = ell;
                state.p_flow[l] = pf;
                state.q_flow[l] = qf;
                self.sum_p[parent] += pf;
                self.sum_q[parent] += qf;
            }

            residual = 0.0f64;
            for &pos in &order[1..] {
                let l = net.parent_line(pos).unwrap_or_default();
                let parent = net.line_upstream(l);
                let line = &lines[l];
                let (pf, qf, ell) = (state.p_flow[l], state.q_flow[l], state.ell[l]);
                let v_old = state.v[pos];
                let vj = state.v[parent] - 2.0 * (line.r * pf + line.x * qf)
                    + (line.r * line.r + line.x * line.x) * ell;
                if !(vj > 0.0) {
                    return Err(PfError::VoltageCollapse { line: l });
                }
                state.v[pos] = vj;
                // The current equation of every line leaving `pos` was solved
                // with the previous voltage; its residual is ℓ·|Δv|.
                let dv = (vj - v_old).abs();
                for &c in net.children(pos) {
                    let cl = net.parent_line(c).unwrap_or_default();
                    residual = residual.max(state.ell[cl] * dv);
                }
            }

            state.iterations = iter;
            if residual <= opts.tol {
                state.interface_p = self.sum_p[root];
                state.interface_q = self.sum_q[root];
                state.losses_p = lines.iter().zip(&state.ell).map(|(l, e)| l.r * e).sum();
                state.losses_q = lines.iter().zip(&state.ell).map(|(l, e)| l.x * e).sum();
                return Ok(());
            }
        }
        Err(PfError::NotConverged {
            iterations: opts.max_iter,
            residual,
        })
    }

    /// Gradient of a weighted sum of state outputs with respect to the dense
    /// per-bus consumptions, by one reverse (adjoint) pass over the tree.
    ///
    /// `state` must be a converged solution; the gradient is that of the
    /// implicit function defined by the DistFlow equations.
    pub fn injection_gradient(
        &mut self,
        net: &RadialNetwork,
        state: &NetworkState,
        w: &OutputWeights<'_>,
        grad_p: &mut [f64],
        grad_q: &mut [f64],
    ) -> Result<(), PfError> {
        let n = net.bus_count();
        if !state.matches(net) || grad_p.len() != n || grad_q.len() != n {
            return Err(PfError::DimensionMismatch);
        }
        let weight = |s: &[f64], i: usize| if s.is_empty() { 0.0 } else { s[i] };
        let lines = net.lines();
        let order = net.order();
        let root = net.slack_position();

        for &j in order[1..].iter().rev() {
            let l = net.parent_line(j).unwrap_or_default();
            let i = net.line_upstream(l);
            let line = &lines[l];
            let (pf, qf, ell) = (state.p_flow[l], state.q_flow[l], state.ell[l]);
            let mut wp = weight(w.p_flow, l);
            let mut wq = weight(w.q_flow, l);
            if i == root {
                wp += w.interface_p;
                wq += w.interface_q;
            }
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for &c in net.children(j) {
                let t = self.t[c];
                s0 += t[0];
                s1 += t[1];
                s2 += t[2];
            }
            let z2 = line.r * line.r + line.x * line.x;
            let m = [
                [1.0, 0.0, -2.0 * pf, 2.0 * line.r],
                [0.0, 1.0, -2.0 * qf, 2.0 * line.x],
                [-line.r, -line.x, state.v[i], -z2],
                [s1, s2, 0.0, 1.0],
            ];
            let rhs = [
                [wp, 1.0, 0.0],
                [wq, 0.0, 1.0],
                [0.0, 0.0, 0.0],
                [weight(w.v, j) - s0, 0.0, 0.0],
            ];
            let y = solve4(m, rhs).ok_or(PfError::VoltageCollapse { line: l })?;
            // y[k][c]: unknown k (α, β, γ, δ), column c (constant, ∂/∂α_parent, ∂/∂β_parent).
            let mut packed = [0.0; 12];
            for k in 0..4 {
                for c in 0..3 {
                    packed[3 * k + c] = y[k][c];
                }
            }
            self.adj[j] = packed;
            self.t[j] = [
                ell * y[2][0] - y[3][0],
                ell * y[2][1] - y[3][1],
                ell * y[2][2] - y[3][2],
            ];
        }

        self.alpha[root] = 0.0;
        self.beta[root] = 0.0;
        for &j in &order[1..] {
            let parent = net.parent(j).unwrap_or_default();
            let (ap, bp) = if parent == root {
                (0.0, 0.0)
            } else {
                (self.alpha[parent], self.beta[parent])
            };
            let y = &self.adj[j];
            self.alpha[j] = y[0] + ap * y[1] + bp * y[2];
            self.beta[j] = y[3] + ap * y[4] + bp * y[5];
        }
        grad_p.copy_from_slice(&self.alpha);
        grad_q.copy_from_slice(&self.beta);
        grad_p[root] = w.interface_p;
        grad_q[root] = w.interface_q;
        Ok(())
    }
}

/// Weights on state outputs for [`PowerFlow::injection_gradient`]. Empty
/// slices mean zero weight.
#[derive(Debug, Clone, Copy, Default)]
pub struct OutputWeights<'a> {
    pub interface_p: f64,
    pub interface_q: f64,
    /// Per bus position, on squared voltage.
    pub v: &'a [f64],
    /// Per line, on upstream-end active flow.
    pub p_flow: &'a [f64],
    pub q_flow: &'a [f64],
}

/// Gaussian elimination with partial pivoting on a 4×4 system with three
/// right-hand sides.
fn solve4(mut m: [[f64; 4]; 4], mut b: [[f64; 3]; 4]) -> Option<[[f64; 3]; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&a, &c| m[a][col].abs().total_cmp(&m[c][col].abs()))?;
        if !(m[piv][col].abs() > 1e-300) {
            return None;
        }
        m.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                let (pm, pb) = (m[col], b[col]);
                for (x, p) in m[row][col..].iter_mut().zip(&pm[col..]) {
                    *x -= f * p;
                }
                for (x, p) in b[row].iter_mut().zip(&pb) {
                    *x -= f * p;
                }
            }
        }
    }
    let mut x = [[0.0; 3]; 4];
    for row in (0..4).rev() {
        for k in 0..3 {
            let mut s = b[row][k];
            for c in row + 1..4 {
                s -= m[row][c] * x[c][k];
            }
            x[row][k] = s / m[row][row];
        }
    }
    Some(x)
}

/// Largest absolute residual of the DistFlow equations, the slack voltage and
/// the interface definition.
pub fn residual_norm(
    net: &RadialNetwork,
    state: &NetworkState,
    inj: &[Injection],
) -> Result<f64, PfError> {
    if !state.matches(net) {
        return Err(PfError::DimensionMismatch);
    }
    let (p, q) = dense_injections(net, inj)?;
    let buses = net.buses();
    let lines = net.lines();
    let n = net.bus_count();
    let mut sum_p: Vec<f64> = (0..n).map(|i| buses[i].load_p + p[i]).collect();
    let mut sum_q: Vec<f64> = (0..n).map(|i| buses[i].load_q + q[i]).collect();
    for l in 0..net.line_count() {
        let up = net.line_upstream(l);
        sum_p[up] += state.p_flow[l];
        sum_q[up] += state.q_flow[l];
    }

    let root = net.slack_position();
    let mut worst = (state.v[root] - net.slack_v()).abs();
    worst = worst.max((state.interface_p - sum_p[root]).abs());
    worst = worst.max((state.interface_q - sum_q[root]).abs());
    for (l, line) in lines.iter().enumerate() {
        let (i, j) = (net.line_upstream(l), net.line_downstream(l));
        let (pf, qf, ell) = (state.p_flow[l], state.q_flow[l], state.ell[l]);
        let bal_p = pf - (sum_p[j] + line.r * ell);
        let bal_q = qf - (sum_q[j] + line.x * ell);
        let current = ell * state.v[i] - (pf * pf + qf * qf);
        let drop = state.v[j]
            - (state.v[i] - 2.0 * (line.r * pf + line.x * qf)
                + (line.r * line.r + line.x * line.x) * ell);
        for r in [bal_p, bal_q, current, drop] {
            if !r.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConstraintId {
    /// Lower voltage bound at a bus position.
    VoltageMin(usize),
    VoltageMax(usize),
    /// Apparent-power limit of a line.
    Thermal(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub constraint: ConstraintId,
    /// Signed slack (negative when violated): p.u.² for voltages, p.u. for
    /// thermal limits.
    pub slack: f64,
}

/// Voltage and thermal constraints whose slack is below `-tol`.
pub fn constraint_violations(
    net: &RadialNetwork,
    state: &NetworkState,
    tol: f64,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (pos, bus) in net.buses().iter().enumerate() {
        let v = state.v[pos];
        if v - bus.v_min < -tol {
            out.push(Violation {
                constraint: ConstraintId::VoltageMin(pos),
                slack: v - bus.v_min,
            });
        }
        if bus.v_max - v < -tol {
            out.push(Violation {
                constraint: ConstraintId::VoltageMax(pos),
                slack: bus.v_max - v,
            });
        }
    }
    for (l, line) in net.lines().iter().enumerate() {
        if let Some(s_max) = line.s_max {
            let s = libm::hypot(state.p_flow[l], state.q_flow[l]);
            if s_max - s < -tol {
                out.push(Violation {
                    constraint: ConstraintId::Thermal(l),
                    slack: s_max - s,
                });
            }
        }
    }
    out
}
