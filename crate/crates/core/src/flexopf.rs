//! Cost-minimising flexibility dispatch.
//!
//! Given a requested shift `(dp, dq)` of the network's interface consumption
//! away from its initial operating point, find unit setpoints that realise it
//! at least regulation cost while keeping every bus voltage and line loading
//! within limits.
//!
//! The problem is solved in reduced space: the decision variables are the
//! per-unit regulation volumes `(p↑, p↓, q↑, q↓)` and the network state is the
//! implicit function computed by [`crate::distflow`]. Interface equalities and
//! network inequalities are handled by an augmented Lagrangian whose
//! subproblems are box-constrained and solved by a Gauss-Newton method on the
//! penalty terms, with derivatives from the adjoint of the power-flow
//! equations. Because the feasible
//! set is nonconvex the method is restarted from several points and the
//! cheapest feasible local optimum is kept.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::distflow::{
    constraint_violations, Injection, NetworkState, OutputWeights, PfError, PfOptions, PowerFlow,
    Violation,
};
use crate::net::{validate_units, FlexUnit, RadialNetwork, UnitError};
use crate::optim::{GaussNewton, GnObjective};

/// Requested change of interface consumption relative to the initial
/// operating point, p.u. (positive = more consumption).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlexRequest {
    pub dp: f64,
    pub dq: f64,
}

/// Setpoint and regulation volumes of one unit, p.u.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UnitDispatch {
    pub p: f64,
    pub q: f64,
    pub p_up: f64,
    pub p_dn: f64,
    pub q_up: f64,
    pub q_dn: f64,
}

impl UnitDispatch {
    pub fn from_setpoint(unit: &FlexUnit, p: f64, q: f64) -> Self {
        let (p_up, p_dn) = split_regulation(p, unit.p0);
        let (q_up, q_dn) = split_regulation(q, unit.q0);
        Self {
            p,
            q,
            p_up,
            p_dn,
            q_up,
            q_dn,
        }
    }

    /// Signed active regulation `p − p⁰`.
    pub fn dp(&self) -> f64 {
        self.p_up - self.p_dn
    }

    pub fn dq(&self) -> f64 {
        self.q_up - self.q_dn
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dispatch {
    pub units: Vec<UnitDispatch>,
}

impl Dispatch {
    /// Every unit at its initial setpoint.
    pub fn initial(units: &[FlexUnit]) -> Self {
        Self {
            units: units
                .iter()
                .map(|u| UnitDispatch::from_setpoint(u, u.p0, u.q0))
                .collect(),
        }
    }

    /// Builds a dispatch from `(p, q)` setpoints using the minimal split.
    pub fn from_setpoints(units: &[FlexUnit], setpoints: &[(f64, f64)]) -> Self {
        Self {
            units: units
                .iter()
                .zip(setpoints)
                .map(|(u, &(p, q))| UnitDispatch::from_setpoint(u, p, q))
                .collect(),
        }
    }

    pub fn injections(&self, units: &[FlexUnit]) -> Vec<Injection> {
        units
            .iter()
            .zip(&self.units)
            .map(|(u, d)| Injection {
                bus: u.bus,
                p: d.p,
                q: d.q,
            })
            .collect()
    }
}

/// Minimal non-negative split of `setpoint − initial` into upward and
/// downward regulation.
pub fn split_regulation(setpoint: f64, initial: f64) -> (f64, f64) {
    let d = setpoint - initial;
    if d >= 0.0 {
        (d, 0.0)
    } else {
        (0.0, -d)
    }
}

/// Regulation cost in `$/h`.
pub fn evaluate_cost(units: &[FlexUnit], dispatch: &Dispatch) -> f64 {
    units
        .iter()
        .zip(&dispatch.units)
        .map(|(u, d)| u.cost_p * (d.p_up + d.p_dn) + u.cost_q * (d.q_up + d.q_dn))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// `None` when the power flow failed.
    pub state: Option<NetworkState>,
    pub violations: Vec<Violation>,
    pub interface_p: f64,
    pub interface_q: f64,
    pub pf_error: Option<PfError>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.state.is_some() && self.violations.is_empty()
    }
}

/// Runs the power flow for `dispatch` and reports network constraint
/// violations and the achieved interface point.
pub fn check_dispatch_feasible(
    net: &RadialNetwork,
    units: &[FlexUnit],
    dispatch: &Dispatch,
    pf: &PfOptions,
    violation_tol: f64,
) -> FeasibilityReport {
    match crate::distflow::solve_power_flow(net, &dispatch.injections(units), pf) {
        Ok(state) => FeasibilityReport {
            violations: constraint_violations(net, &state, violation_tol),
            interface_p: state.interface_p,
            interface_q: state.interface_q,
            state: Some(state),
            pf_error: None,
        },
        Err(e) => FeasibilityReport {
            state: None,
            violations: Vec::new(),
            interface_p: f64::NAN,
            interface_q: f64::NAN,
            pf_error: Some(e),
        },
    }
}

/// Gradient of interface consumption with respect to every unit setpoint,
/// `[∂P/∂p_k, ∂P/∂q_k, ∂Q/∂p_k, ∂Q/∂q_k]` per unit.
pub fn interface_sensitivities(
    net: &RadialNetwork,
    units: &[FlexUnit],
    dispatch: &Dispatch,
    pf_opts: &PfOptions,
) -> Result<Vec<[f64; 4]>, PfError> {
    let (p, q) = crate::distflow::dense_injections(net, &dispatch.injections(units))?;
    let mut pf = PowerFlow::new(net);
    let mut state = NetworkState::zeros(net);
    pf.solve(net, &p, &q, pf_opts, &mut state)?;
    let n = net.bus_count();
    let (mut gp_p, mut gq_p) = (vec![0.0; n], vec![0.0; n]);
    let (mut gp_q, mut gq_q) = (vec![0.0; n], vec![0.0; n]);
    let wp = OutputWeights {
        interface_p: 1.0,
        ..OutputWeights::default()
    };
    let wq = OutputWeights {
        interface_q: 1.0,
        ..OutputWeights::default()
    };
    pf.injection_gradient(net, &state, &wp, &mut gp_p, &mut gq_p)?;
    pf.injection_gradient(net, &state, &wq, &mut gp_q, &mut gq_q)?;
    Ok(units
        .iter()
        .map(|u| {
            let pos = net.position(u.bus).unwrap_or_default();
            [gp_p[pos], gq_p[pos], gp_q[pos], gq_q[pos]]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    #[default]
    Adjoint,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Accepted interface mismatch, p.u.
    pub interface_tol: f64,
    /// Projected-gradient tolerance of the subproblems.
    pub stat_tol: f64,
    /// Accepted voltage (p.u.²) or thermal (p.u.) limit violation.
    pub violation_tol: f64,
    /// Pseudo-random restarts tried when no standard start succeeds.
    pub max_restarts: usize,
    pub seed: u64,
    pub gradient: GradientMode,
    pub max_outer: usize,
    pub max_inner: usize,
    pub pf: PfOptions,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            interface_tol: 1e-4,
            stat_tol: 1e-6,
            violation_tol: 1e-6,
            max_restarts: 2,
            seed: 0,
            gradient: GradientMode::Adjoint,
            max_outer: 30,
            max_inner: 60,
            pf: PfOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlexError {
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error("initial operating point: {0}")]
    BaseCase(PfError),
    #[error("invalid solver options: {0}")]
    Options(&'static str),
    #[error("request is not finite")]
    Request,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NotConverged,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::NotConverged => "not_converged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlexSolveResult {
    pub status: SolveStatus,
    /// For non-optimal results, the dispatch closest to the target.
    pub dispatch: Dispatch,
    /// `$/h`, always equal to [`evaluate_cost`] of `dispatch`.
    pub cost: f64,
    pub state: Option<NetworkState>,
    /// Largest interface mismatch of the reported dispatch, p.u.
    pub interface_error: f64,
    /// Pseudo-random restarts used beyond the standard starts.
    pub restarts_used: usize,
}

impl FlexSolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Allowed regulation direction for one power channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelSign {
    #[default]
    Free,
    UpOnly,
    DownOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SignRestriction {
    pub p: ChannelSign,
    pub q: ChannelSign,
}

/// A network, its units and solver settings, prepared for repeated solves.
#[derive(Debug, Clone)]
pub struct FlexProblem<'a> {
    net: &'a RadialNetwork,
    units: &'a [FlexUnit],
    opts: SolverOptions,
    unit_pos: Vec<usize>,
    base: NetworkState,
    /// Objective normalisation, `$/h` per p.u.
    price_scale: f64,
    thermal: Vec<(usize, f64)>,
}

const RHO_INIT: f64 = 1e3;
const RHO_MAX: f64 = 1e10;
const FD_STEP: f64 = 1e-7;
/// Consecutive outer iterations without a 10% infeasibility reduction
/// before a start is abandoned.
const STALL_LIMIT: usize = 4;
/// Initial diagonal of the secant curvature term, in objective units.
const SECANT_INIT: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StartEnd {
    Converged,
    Stagnated,
    Budget,
    Failed,
}

impl<'a> FlexProblem<'a> {
    pub fn new(
        net: &'a RadialNetwork,
        units: &'a [FlexUnit],
        opts: SolverOptions,
    ) -> Result<Self, FlexError> {
        validate_units(net, units)?;
        if !(opts.interface_tol > 0.0 && opts.stat_tol > 0.0 && opts.violation_tol > 0.0) {
            return Err(FlexError::Options("tolerances must be positive"));
        }
        if !(opts.pf.tol > 0.0) {
            return Err(FlexError::Options("power-flow tolerance must be positive"));
        }
        let unit_pos = units
            .iter()
            .map(|u| net.position(u.bus).unwrap_or_default())
            .collect();
        let base = crate::distflow::solve_power_flow(
            net,
            &Dispatch::initial(units).injections(units),
            &opts.pf,
        )
        .map_err(FlexError::BaseCase)?;
        let price_scale = units
            .iter()
            .map(|u| u.cost_p.max(u.cost_q))
            .fold(1e-12, f64::max);
        let thermal = net
            .lines()
            .iter()
            .enumerate()
            .filter_map(|(l, line)| line.s_max.map(|s| (l, s * s)))
            .collect();
        Ok(Self {
            net,
            units,
            opts,
            unit_pos,
            base,
            price_scale,
            thermal,
        })
    }

    pub fn network(&self) -> &'a RadialNetwork {
        self.net
    }

    pub fn units(&self) -> &'a [FlexUnit] {
        self.units
    }

    pub fn options(&self) -> &SolverOptions {
        &self.opts
    }

    /// State at the initial setpoints.
    pub fn base_state(&self) -> &NetworkState {
        &self.base
    }

    /// Absolute interface target for a request.
    pub fn target(&self, req: FlexRequest) -> (f64, f64) {
        (
            self.base.interface_p + req.dp,
            self.base.interface_q + req.dq,
        )
    }

    pub fn solve(&self, req: FlexRequest) -> FlexSolveResult {
        self.solve_restricted(req, SignRestriction::default(), &[])
    }

    /// Solve with every unit's regulation in each channel sharing one sign.
    /// All four sign combinations are tried and the cheapest optimum kept.
    pub fn solve_swap_free(&self, req: FlexRequest, warm: &[&Dispatch]) -> FlexSolveResult {
        let lead = |d: f64| {
            if d >= 0.0 {
                ChannelSign::UpOnly
            } else {
                ChannelSign::DownOnly
            }
        };
        let flip = |s: ChannelSign| match s {
            ChannelSign::UpOnly => ChannelSign::DownOnly,
            _ => ChannelSign::UpOnly,
        };
        let (sp, sq) = (lead(req.dp), lead(req.dq));
        let combos = [
            (sp, sq),
            (flip(sp), sq),
            (sp, flip(sq)),
            (flip(sp), flip(sq)),
        ];
        let mut best: Option<FlexSolveResult> = None;
        let mut restarts = 0;
        for (p, q) in combos {
            let r = self.solve_restricted(req, SignRestriction { p, q }, warm);
            restarts += r.restarts_used;
            best = Some(match best {
                None => r,
                Some(b) => pick_better(b, r),
            });
        }
        let mut best = best.unwrap_or_else(|| self.failed_result());
        best.restarts_used = restarts;
        best
    }

    /// Solve with sign-restricted regulation boxes and extra warm starts.
    pub fn solve_restricted(
        &self,
        req: FlexRequest,
        restriction: SignRestriction,
        warm: &[&Dispatch],
    ) -> FlexSolveResult {
        if !(req.dp.is_finite() && req.dq.is_finite()) {
            return self.failed_result();
        }
        let n = 4 * self.units.len();
        let lb = vec![0.0; n];
        let ub = self.upper_bounds(restriction);
        let mut ev = Evaluator::new(self, self.target(req));
        let mut gn = GaussNewton::new(n, SECANT_INIT);

        let mut starts: Vec<Vec<f64>> = Vec::new();
        let push = |z: Vec<f64>, starts: &mut Vec<Vec<f64>>| {
            let z: Vec<f64> = z.iter().zip(&ub).map(|(v, u)| v.clamp(0.0, *u)).collect();
            if !starts.contains(&z) {
                starts.push(z);
            }
        };
        for d in warm {
            if d.units.len() == self.units.len() {
                push(self.encode(d), &mut starts);
            }
        }
        push(vec![0.0; n], &mut starts);
        for (sp, sq) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            push(self.corner(&ub, sp, sq, 0.5), &mut starts);
        }

        let mut tracker = Tracker::default();
        for z0 in &starts {
            let mut z = z0.clone();
            let end = self.run_start(&mut ev, &mut gn, &mut z, &lb, &ub);
            tracker.record(self, &mut ev, &z, end);
        }
        let mut restarts = 0;
        if tracker.best_feasible.is_none() && self.opts.max_restarts > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(request_seed(self.opts.seed, req));
            while restarts < self.opts.max_restarts {
                restarts += 1;
                let mut z = vec![0.0; n];
                for k in 0..n / 2 {
                    let u: f64 = rng.random_range(-1.0..=1.0);
                    if u >= 0.0 {
                        z[2 * k] = u * ub[2 * k];
                    } else {
                        z[2 * k + 1] = -u * ub[2 * k + 1];
                    }
                }
                let end = self.run_start(&mut ev, &mut gn, &mut z, &lb, &ub);
                tracker.record(self, &mut ev, &z, end);
                if tracker.best_feasible.is_some() {
                    break;
                }
            }
        }
        let mut result = tracker.finish(self);
        result.restarts_used = restarts;
        result
    }

    fn failed_result(&self) -> FlexSolveResult {
        let dispatch = Dispatch::initial(self.units);
        FlexSolveResult {
            status: SolveStatus::Infeasible,
            cost: evaluate_cost(self.units, &dispatch),
            dispatch,
            state: None,
            interface_error: f64::INFINITY,
            restarts_used: 0,
        }
    }

    /// Variable layout per unit: `[p↑, p↓, q↑, q↓]`.
    fn upper_bounds(&self, r: SignRestriction) -> Vec<f64> {
        let mut ub = Vec::with_capacity(4 * self.units.len());
        for u in self.units {
            let (pu, pd) = channel_bounds(r.p, u.p_max - u.p0, u.p0 - u.p_min);
            let (qu, qd) = channel_bounds(r.q, u.q_max - u.q0, u.q0 - u.q_min);
            ub.extend_from_slice(&[pu, pd, qu, qd]);
        }
        ub
    }

    fn corner(&self, ub: &[f64], sp: f64, sq: f64, frac: f64) -> Vec<f64> {
        let mut z = vec![0.0; ub.len()];
        for k in 0..self.units.len() {
            let i = 4 * k;
            if sp > 0.0 {
                z[i] = frac * ub[i];
            } else {
                z[i + 1] = frac * ub[i + 1];
            }
            if sq > 0.0 {
                z[i + 2] = frac * ub[i + 2];
            } else {
                z[i + 3] = frac * ub[i + 3];
            }
        }
        z
    }

    fn encode(&self, d: &Dispatch) -> Vec<f64> {
        let mut z = Vec::with_capacity(4 * self.units.len());
        for (u, ud) in self.units.iter().zip(&d.units) {
            let (pu, pd) = split_regulation(ud.p, u.p0);
            let (qu, qd) = split_regulation(ud.q, u.q0);
            z.extend_from_slice(&[pu, pd, qu, qd]);
        }
        z
    }

    fn setpoints(&self, z: &[f64]) -> Vec<(f64, f64)> {
        self.units
            .iter()
            .enumerate()
            .map(|(k, u)| {
                let i = 4 * k;
                (
                    (u.p0 + z[i] - z[i + 1]).clamp(u.p_min, u.p_max),
                    (u.q0 + z[i + 2] - z[i + 3]).clamp(u.q_min, u.q_max),
                )
            })
            .collect()
    }

    /// One augmented-Lagrangian run from `z`.
    fn run_start(
        &self,
        ev: &mut Evaluator<'_, '_>,
        gn: &mut GaussNewton,
        z: &mut [f64],
        lb: &[f64],
        ub: &[f64],
    ) -> StartEnd {
        ev.reset_multipliers();
        gn.reset();
        // Pull infeasible-to-evaluate starts towards the initial point.
        let mut tries = 0;
        while !ev.evaluate_state(z) {
            tries += 1;
            if tries > 20 {
                return StartEnd::Failed;
            }
            z.iter_mut().for_each(|v| *v *= 0.5);
        }
        let if_goal = 1e-2 * self.opts.interface_tol;
        let viol_goal = 1e-2 * self.opts.violation_tol;
        let mut prev = f64::INFINITY;
        let mut stalls = 0;
        for _ in 0..self.opts.max_outer {
            let inner = gn.minimize(ev, z, lb, ub, self.opts.stat_tol, self.opts.max_inner);
            if inner.failed || !ev.evaluate_state(z) {
                return StartEnd::Failed;
            }
            let (e_if, e_v) = ev.infeasibility();
            if e_if <= if_goal && e_v <= viol_goal && inner.converged {
                return StartEnd::Converged;
            }
            let measure = (e_if / if_goal).max(e_v / viol_goal);
            ev.update_multipliers();
            if measure > 0.25 * prev {
                ev.rho = (ev.rho * 10.0).min(RHO_MAX);
            }
            if measure > 0.9 * prev {
                stalls += 1;
                if stalls >= STALL_LIMIT {
                    return StartEnd::Stagnated;
                }
            } else {
                stalls = 0;
            }
            prev = prev.min(measure);
        }
        StartEnd::Budget
    }
}

fn channel_bounds(sign: ChannelSign, up: f64, dn: f64) -> (f64, f64) {
    match sign {
        ChannelSign::Free => (up, dn),
        ChannelSign::UpOnly => (up, 0.0),
        ChannelSign::DownOnly => (0.0, dn),
    }
}

/// Optimal beats non-optimal, cheaper optimal beats dearer, and among failures
/// not-converged beats infeasible, then the smaller mismatch wins. Ties keep `a`.
fn pick_better(a: FlexSolveResult, b: FlexSolveResult) -> FlexSolveResult {
    match (a.is_optimal(), b.is_optimal()) {
        (true, true) => {
            if b.cost < a.cost {
                b
            } else {
                a
            }
        }
        (true, false) => a,
        (false, true) => b,
        (false, false) => {
            let rank = |r: &FlexSolveResult| (r.status == SolveStatus::Infeasible) as u8;
            if rank(&b) < rank(&a)
                || (rank(&b) == rank(&a) && b.interface_error < a.interface_error)
            {
                b
            } else {
                a
            }
        }
    }
}

fn request_seed(seed: u64, req: FlexRequest) -> u64 {
    let mix = |mut x: u64| {
        x ^= x >> 33;
        x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
        x ^= x >> 33;
        x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
        x ^ (x >> 33)
    };
    mix(seed ^ mix(req.dp.to_bits()) ^ mix(req.dq.to_bits()).rotate_left(17))
}

/// Objective or score, setpoints, state and interface error of a start.
type Candidate = (f64, Vec<(f64, f64)>, NetworkState, f64);

/// Best outcomes seen across starts.
#[derive(Default)]
struct Tracker {
    /// (cost, setpoints, state, interface error)
    best_feasible: Option<Candidate>,
    /// (infeasibility score, setpoints, state, interface error)
    best_relaxed: Option<Candidate>,
    unfinished: bool,
}

impl Tracker {
    fn record(
        &mut self,
        prob: &FlexProblem<'_>,
        ev: &mut Evaluator<'_, '_>,
        z: &[f64],
        end: StartEnd,
    ) {
        if end == StartEnd::Budget {
            self.unfinished = true;
        }
        let sp = prob.setpoints(z);
        let Some(state) = ev.solve_setpoints(&sp) else {
            return;
        };
        let (tp, tq) = ev.target;
        let err = (state.interface_p - tp)
            .abs()
            .max((state.interface_q - tq).abs());
        let ok = err <= prob.opts.interface_tol
            && constraint_violations(prob.net, &state, prob.opts.violation_tol).is_empty();
        if ok {
            let cost = evaluate_cost(prob.units, &Dispatch::from_setpoints(prob.units, &sp));
            if self.best_feasible.as_ref().is_none_or(|b| cost < b.0) {
                self.best_feasible = Some((cost, sp, state, err));
            }
        } else {
            let (e_if, e_v) = infeasibility_of(prob, &state, ev.target);
            let score = (e_if / prob.opts.interface_tol).max(e_v / prob.opts.violation_tol);
            if self.best_relaxed.as_ref().is_none_or(|b| score < b.0) {
                self.best_relaxed = Some((score, sp, state, err));
            }
        }
    }

    fn finish(self, prob: &FlexProblem<'_>) -> FlexSolveResult {
        if let Some((cost, sp, state, err)) = self.best_feasible {
            return FlexSolveResult {
                status: SolveStatus::Optimal,
                dispatch: Dispatch::from_setpoints(prob.units, &sp),
                cost,
                state: Some(state),
                interface_error: err,
                restarts_used: 0,
            };
        }
        let status = if self.unfinished {
            SolveStatus::NotConverged
        } else {
            SolveStatus::Infeasible
        };
        match self.best_relaxed {
            Some((_, sp, state, err)) => {
                let dispatch = Dispatch::from_setpoints(prob.units, &sp);
                FlexSolveResult {
                    status,
                    cost: evaluate_cost(prob.units, &dispatch),
                    dispatch,
                    state: Some(state),
                    interface_error: err,
                    restarts_used: 0,
                }
            }
            None => {
                let mut r = prob.failed_result();
                r.status = status;
                r
            }
        }
    }
}

/// Interface mismatch (p.u.) and worst limit violation (p.u.² for voltages,
/// p.u. for thermal limits) of a state.
fn infeasibility_of(
    prob: &FlexProblem<'_>,
    state: &NetworkState,
    target: (f64, f64),
) -> (f64, f64) {
    let e_if = (state.interface_p - target.0)
        .abs()
        .max((state.interface_q - target.1).abs());
    let mut e_v = 0.0f64;
    for (pos, bus) in prob.net.buses().iter().enumerate() {
        e_v = e_v
            .max(bus.v_min - state.v[pos])
            .max(state.v[pos] - bus.v_max);
    }
    for &(l, s2) in &prob.thermal {
        let s = libm::hypot(state.p_flow[l], state.q_flow[l]);
        e_v = e_v.max(s - libm::sqrt(s2));
    }
    (e_if, e_v)
}

/// A state output appearing in the merit function.
#[derive(Debug, Clone, Copy)]
enum Output {
    InterfaceP,
    InterfaceQ,
    Voltage(usize),
    /// Squared apparent flow of a line.
    Thermal(usize),
}

fn output_value(state: &NetworkState, o: Output) -> f64 {
    match o {
        Output::InterfaceP => state.interface_p,
        Output::InterfaceQ => state.interface_q,
        Output::Voltage(pos) => state.v[pos],
        Output::Thermal(l) => state.p_flow[l] * state.p_flow[l] + state.q_flow[l] * state.q_flow[l],
    }
}

/// Augmented-Lagrangian merit function over the regulation variables.
struct Evaluator<'p, 'a> {
    prob: &'p FlexProblem<'a>,
    pf: PowerFlow,
    state: NetworkState,
    scratch: NetworkState,
    p_inj: Vec<f64>,
    q_inj: Vec<f64>,
    gp: Vec<f64>,
    gq: Vec<f64>,
    ugp: Vec<f64>,
    ugq: Vec<f64>,
    wv: Vec<f64>,
    wpf: Vec<f64>,
    wqf: Vec<f64>,
    target: (f64, f64),
    lambda: [f64; 2],
    mu_lo: Vec<f64>,
    mu_hi: Vec<f64>,
    mu_th: Vec<f64>,
    rho: f64,
    outputs: Vec<Output>,
    /// Per output, `[∂o/∂p, ∂o/∂q]` for every unit.
    rows: Vec<f64>,
    unit_w: Vec<f64>,
}

impl<'p, 'a> Evaluator<'p, 'a> {
    fn new(prob: &'p FlexProblem<'a>, target: (f64, f64)) -> Self {
        let n = prob.net.bus_count();
        let m = prob.net.line_count();
        Self {
            prob,
            pf: PowerFlow::new(prob.net),
            state: NetworkState::zeros(prob.net),
            scratch: NetworkState::zeros(prob.net),
            p_inj: vec![0.0; n],
            q_inj: vec![0.0; n],
            gp: vec![0.0; n],
            gq: vec![0.0; n],
            ugp: vec![0.0; prob.units.len()],
            ugq: vec![0.0; prob.units.len()],
            wv: vec![0.0; n],
            wpf: if prob.thermal.is_empty() {
                Vec::new()
            } else {
                vec![0.0; m]
            },
            wqf: if prob.thermal.is_empty() {
                Vec::new()
            } else {
                vec![0.0; m]
            },
            target,
            lambda: [0.0; 2],
            mu_lo: vec![0.0; n],
            mu_hi: vec![0.0; n],
            mu_th: vec![0.0; prob.thermal.len()],
            rho: RHO_INIT,
            outputs: Vec::new(),
            rows: Vec::new(),
            unit_w: vec![0.0; n.max(m)],
        }
    }

    fn reset_multipliers(&mut self) {
        self.lambda = [0.0; 2];
        self.mu_lo.fill(0.0);
        self.mu_hi.fill(0.0);
        self.mu_th.fill(0.0);
        self.rho = RHO_INIT;
    }

    fn load_setpoints(&mut self, sp: &[(f64, f64)]) {
        self.p_inj.fill(0.0);
        self.q_inj.fill(0.0);
        for (&pos, &(p, q)) in self.prob.unit_pos.iter().zip(sp) {
            self.p_inj[pos] += p;
            self.q_inj[pos] += q;
        }
    }

    fn load_z(&mut self, z: &[f64]) {
        self.p_inj.fill(0.0);
        self.q_inj.fill(0.0);
        for (k, (u, &pos)) in self.prob.units.iter().zip(&self.prob.unit_pos).enumerate() {
            let i = 4 * k;
            self.p_inj[pos] += u.p0 + z[i] - z[i + 1];
            self.q_inj[pos] += u.q0 + z[i + 2] - z[i + 3];
        }
    }

    /// Solves the power flow at `z` into `self.state`.
    fn evaluate_state(&mut self, z: &[f64]) -> bool {
        self.load_z(z);
        self.pf
            .solve(
                self.prob.net,
                &self.p_inj,
                &self.q_inj,
                &self.prob.opts.pf,
                &mut self.state,
            )
            .is_ok()
    }

    fn solve_setpoints(&mut self, sp: &[(f64, f64)]) -> Option<NetworkState> {
        self.load_setpoints(sp);
        let mut st = NetworkState::zeros(self.prob.net);
        self.pf
            .solve(
                self.prob.net,
                &self.p_inj,
                &self.q_inj,
                &self.prob.opts.pf,
                &mut st,
            )
            .ok()?;
        Some(st)
    }

    fn infeasibility(&self) -> (f64, f64) {
        infeasibility_of(self.prob, &self.state, self.target)
    }

    fn update_multipliers(&mut self) {
        let st = &self.state;
        self.lambda[0] += self.rho * (st.interface_p - self.target.0);
        self.lambda[1] += self.rho * (st.interface_q - self.target.1);
        for (pos, bus) in self.prob.net.buses().iter().enumerate() {
            self.mu_lo[pos] = (self.mu_lo[pos] + self.rho * (bus.v_min - st.v[pos])).max(0.0);
            self.mu_hi[pos] = (self.mu_hi[pos] + self.rho * (st.v[pos] - bus.v_max)).max(0.0);
        }
        for (i, &(l, s2)) in self.prob.thermal.iter().enumerate() {
            let g = st.p_flow[l] * st.p_flow[l] + st.q_flow[l] * st.q_flow[l] - s2;
            self.mu_th[i] = (self.mu_th[i] + self.rho * g).max(0.0);
        }
    }

    /// Network part of the merit function at `state`; optionally fills the
    /// adjoint output weights.
    fn network_terms(&mut self, use_scratch: bool, fill_weights: bool) -> f64 {
        let st = if use_scratch {
            &self.scratch
        } else {
            &self.state
        };
        let rho = self.rho;
        let hp = st.interface_p - self.target.0;
        let hq = st.interface_q - self.target.1;
        let mut val = self.lambda[0] * hp + self.lambda[1] * hq + 0.5 * rho * (hp * hp + hq * hq);
        let phr = |mu: f64, g: f64| {
            let t = (mu + rho * g).max(0.0);
            ((t * t - mu * mu) / (2.0 * rho), t)
        };
        for (pos, bus) in self.prob.net.buses().iter().enumerate() {
            let (a, ta) = phr(self.mu_lo[pos], bus.v_min - st.v[pos]);
            let (b, tb) = phr(self.mu_hi[pos], st.v[pos] - bus.v_max);
            val += a + b;
            if fill_weights {
                self.wv[pos] = tb - ta;
            }
        }
        for (i, &(l, s2)) in self.prob.thermal.iter().enumerate() {
            let (pf, qf) = (st.p_flow[l], st.q_flow[l]);
            let (a, t) = phr(self.mu_th[i], pf * pf + qf * qf - s2);
            val += a;
            if fill_weights {
                self.wpf[l] = 2.0 * pf * t;
                self.wqf[l] = 2.0 * qf * t;
            }
        }
        val
    }
}

impl GnObjective for Evaluator<'_, '_> {
    fn value_grad(&mut self, z: &[f64], grad: &mut [f64]) -> Option<f64> {
        if !self.evaluate_state(z) {
            return None;
        }
        let prob = self.prob;
        let scale = prob.price_scale;
        let mut val = 0.0;
        for (k, u) in prob.units.iter().enumerate() {
            let i = 4 * k;
            val += (u.cost_p * (z[i] + z[i + 1]) + u.cost_q * (z[i + 2] + z[i + 3])) / scale;
        }
        val += self.network_terms(false, true);
        if !val.is_finite() {
            return None;
        }

        match prob.opts.gradient {
            GradientMode::Adjoint => {
                let hp = self.state.interface_p - self.target.0;
                let hq = self.state.interface_q - self.target.1;
                let w = OutputWeights {
                    interface_p: self.lambda[0] + self.rho * hp,
                    interface_q: self.lambda[1] + self.rho * hq,
                    v: &self.wv,
                    p_flow: &self.wpf,
                    q_flow: &self.wqf,
                };
                self.pf
                    .injection_gradient(prob.net, &self.state, &w, &mut self.gp, &mut self.gq)
                    .ok()?;
                for (k, &pos) in prob.unit_pos.iter().enumerate() {
                    self.ugp[k] = self.gp[pos];
                    self.ugq[k] = self.gq[pos];
                }
            }
            GradientMode::FiniteDifference => self.unit_gradients_fd(z)?,
        }
        for (k, u) in prob.units.iter().enumerate() {
            let i = 4 * k;
            let (dp, dq) = (self.ugp[k], self.ugq[k]);
            grad[i] = u.cost_p / scale + dp;
            grad[i + 1] = u.cost_p / scale - dp;
            grad[i + 2] = u.cost_q / scale + dq;
            grad[i + 3] = u.cost_q / scale - dq;
        }
        Some(val)
    }

    fn add_curvature(&mut self, hess: &mut [f64]) -> Option<()> {
        let prob = self.prob;
        let rho = self.rho;
        self.outputs.clear();
        self.outputs.push(Output::InterfaceP);
        self.outputs.push(Output::InterfaceQ);
        for (pos, bus) in prob.net.buses().iter().enumerate() {
            let v = self.state.v[pos];
            if self.mu_lo[pos] + rho * (bus.v_min - v) > 0.0
                || self.mu_hi[pos] + rho * (v - bus.v_max) > 0.0
            {
                self.outputs.push(Output::Voltage(pos));
            }
        }
        for (i, &(l, s2)) in prob.thermal.iter().enumerate() {
            let (pf, qf) = (self.state.p_flow[l], self.state.q_flow[l]);
            if self.mu_th[i] + rho * (pf * pf + qf * qf - s2) > 0.0 {
                self.outputs.push(Output::Thermal(l));
            }
        }
        let nu = prob.units.len();
        self.rows.clear();
        self.rows.resize(self.outputs.len() * 2 * nu, 0.0);
        match prob.opts.gradient {
            GradientMode::Adjoint => self.rows_adjoint()?,
            GradientMode::FiniteDifference => self.rows_fd()?,
        }
        let n = 4 * nu;
        let mut r = vec![0.0; n];
        for row in self.rows.chunks_exact(2 * nu) {
            for k in 0..nu {
                let (a, b) = (row[2 * k], row[2 * k + 1]);
                r[4 * k..4 * k + 4].copy_from_slice(&[a, -a, b, -b]);
            }
            for i in 0..n {
                for j in 0..n {
                    hess[i * n + j] += rho * r[i] * r[j];
                }
            }
        }
        Some(())
    }
}

impl Evaluator<'_, '_> {
    /// One adjoint pass per output.
    fn rows_adjoint(&mut self) -> Option<()> {
        let prob = self.prob;
        let nu = prob.units.len();
        for (o, &out) in self.outputs.iter().enumerate() {
            let mut w = OutputWeights::default();
            let (mut wp, mut wq) = (Vec::new(), Vec::new());
            match out {
                Output::InterfaceP => w.interface_p = 1.0,
                Output::InterfaceQ => w.interface_q = 1.0,
                Output::Voltage(pos) => {
                    self.unit_w.fill(0.0);
                    self.unit_w[pos] = 1.0;
                }
                Output::Thermal(l) => {
                    wp = vec![0.0; prob.net.line_count()];
                    wq = vec![0.0; prob.net.line_count()];
                    wp[l] = 2.0 * self.state.p_flow[l];
                    wq[l] = 2.0 * self.state.q_flow[l];
                }
            }
            if let Output::Voltage(_) = out {
                w.v = &self.unit_w[..prob.net.bus_count()];
            }
            w.p_flow = &wp;
            w.q_flow = &wq;
            self.pf
                .injection_gradient(prob.net, &self.state, &w, &mut self.gp, &mut self.gq)
                .ok()?;
            for (k, &pos) in prob.unit_pos.iter().enumerate() {
                self.rows[o * 2 * nu + 2 * k] = self.gp[pos];
                self.rows[o * 2 * nu + 2 * k + 1] = self.gq[pos];
            }
        }
        Some(())
    }

    /// Central differences of every output in every unit setpoint, at the
    /// injections last loaded.
    fn rows_fd(&mut self) -> Option<()> {
        let prob = self.prob;
        let nu = prob.units.len();
        for k in 0..nu {
            let pos = prob.unit_pos[k];
            for chan in 0..2 {
                for sign in [1.0, -1.0] {
                    let inj = if chan == 0 {
                        &mut self.p_inj
                    } else {
                        &mut self.q_inj
                    };
                    inj[pos] += sign * FD_STEP;
                    let ok = self.pf.solve(
                        prob.net,
                        &self.p_inj,
                        &self.q_inj,
                        &prob.opts.pf,
                        &mut self.scratch,
                    );
                    let inj = if chan == 0 {
                        &mut self.p_inj
                    } else {
                        &mut self.q_inj
                    };
                    inj[pos] -= sign * FD_STEP;
                    ok.ok()?;
                    for (o, &out) in self.outputs.iter().enumerate() {
                        self.rows[o * 2 * nu + 2 * k + chan] +=
                            sign * output_value(&self.scratch, out) / (2.0 * FD_STEP);
                    }
                }
            }
        }
        Some(())
    }

    /// Central differences of the network terms in every unit setpoint,
    /// written to `ugp`/`ugq`.
    fn unit_gradients_fd(&mut self, z: &[f64]) -> Option<()> {
        let prob = self.prob;
        self.load_z(z);
        for k in 0..prob.units.len() {
            let pos = prob.unit_pos[k];
            for chan in 0..2 {
                let mut diff = 0.0;
                for sign in [1.0, -1.0] {
                    let inj = if chan == 0 {
                        &mut self.p_inj
                    } else {
                        &mut self.q_inj
                    };
                    inj[pos] += sign * FD_STEP;
                    let ok = self.pf.solve(
                        prob.net,
                        &self.p_inj,
                        &self.q_inj,
                        &prob.opts.pf,
                        &mut self.scratch,
                    );
                    let inj = if chan == 0 {
                        &mut self.p_inj
                    } else {
                        &mut self.q_inj
                    };
                    inj[pos] -= sign * FD_STEP;
                    ok.ok()?;
                    diff += sign * self.network_terms(true, false);
                }
                let g = diff / (2.0 * FD_STEP);
                if chan == 0 {
                    self.ugp[k] = g;
                } else {
                    self.ugq[k] = g;
                }
            }
        }
        Some(())
    }
}
