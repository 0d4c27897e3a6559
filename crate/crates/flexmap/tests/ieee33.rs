use flexmap::io::{ieee33, ieee33_units, network_to_file, units_to_file, IEEE33_JSON};
use flexmap_core::distflow::{solve_power_flow, ConstraintId, PfOptions};
use flexmap_core::flexopf::{
    check_dispatch_feasible, Dispatch, FlexProblem, FlexRequest, SolveStatus, SolverOptions,
};
use flexmap_core::net::{FlexUnit, RadialNetwork};
use flexmap_core::sweep::{Channel, SweepCell};

fn setup() -> (RadialNetwork, Vec<FlexUnit>) {
    let net = ieee33();
    let units = ieee33_units(&net);
    (net, units)
}

#[test]
fn bundled_feeder_has_the_standard_shape() {
    let (net, units) = setup();
    assert_eq!(net.bus_count(), 33);
    assert_eq!(net.line_count(), 32);
    let base = net.base();
    let p: f64 = net.buses().iter().map(|b| base.pu_to_kw(b.load_p)).sum();
    let q: f64 = net.buses().iter().map(|b| base.pu_to_kw(b.load_q)).sum();
    assert!((p - 3715.0).abs() < 1e-9 && (q - 2300.0).abs() < 1e-9);
    let names: Vec<_> = units.iter().map(|u| (u.name.as_str(), u.bus)).collect();
    assert_eq!(names, [("A", 22), ("B", 25), ("C", 33), ("D", 18)]);
    assert!(IEEE33_JSON.contains("\"slack_bus\": 1"));
}

#[test]
fn file_forms_round_trip() {
    let (net, units) = setup();
    let back = flexmap::io::network_from_file(&network_to_file(&net)).unwrap();
    assert_eq!(back.buses(), net.buses());
    assert_eq!(back.lines(), net.lines());
    let text = serde_json::to_string(&units_to_file(&net, &units)).unwrap();
    let again = flexmap::io::parse_units(&text, std::path::Path::new("units.json"), &net).unwrap();
    assert_eq!(again, units);
}

#[test]
fn base_case_is_within_limits_and_lossy() {
    let (net, _) = setup();
    let st = solve_power_flow(&net, &[], &PfOptions::default()).unwrap();
    let base = net.base();
    let losses = base.pu_to_kw(st.losses_p);
    assert!((losses - 202.7).abs() < 1.0, "{losses}");
    assert!((base.pu_to_kw(st.interface_p) - 3715.0 - losses).abs() < 1e-6);
    let (pos, v) = st.min_voltage();
    assert_eq!(net.buses()[pos].id, 18);
    assert!(v.sqrt() > 0.9);
}

fn regulating(cell: &SweepCell) -> Vec<usize> {
    (0..cell.dispatch.units.len())
        .filter(|&u| {
            [Channel::P, Channel::Q]
                .iter()
                .any(|&c| cell.regulation(u, c).abs() > 1e-6)
        })
        .collect()
}

#[test]
fn small_requests_use_the_cheapest_unit() {
    let (net, units) = setup();
    let prob = FlexProblem::new(&net, &units, SolverOptions::default()).unwrap();
    let base = net.base();
    let d = units.iter().position(|u| u.name == "D").unwrap();
    for (dp, dq) in [(-50.0, 0.0), (50.0, 0.0), (0.0, -50.0), (-30.0, 30.0)] {
        let req = FlexRequest {
            dp: base.kw_to_pu(dp),
            dq: base.kw_to_pu(dq),
        };
        let r = prob.solve(req);
        assert_eq!(r.status, SolveStatus::Optimal, "{dp},{dq}");
        let cell = SweepCell::from_result(&net, &r);
        assert_eq!(regulating(&cell), vec![d], "{dp},{dq}");
    }
}

#[test]
fn corner_of_the_box_is_infeasible() {
    let (net, units) = setup();
    let prob = FlexProblem::new(&net, &units, SolverOptions::default()).unwrap();
    let base = net.base();
    let r = prob.solve(FlexRequest {
        dp: base.kw_to_pu(2000.0),
        dq: base.kw_to_pu(2000.0),
    });
    assert_eq!(r.status, SolveStatus::Infeasible);
    let mirror = prob.solve(FlexRequest {
        dp: base.kw_to_pu(-2000.0),
        dq: base.kw_to_pu(-2000.0),
    });
    assert_eq!(mirror.status, SolveStatus::Optimal);
}

#[test]
fn full_consumption_everywhere_breaks_the_voltage_band() {
    let (net, units) = setup();
    let sp: Vec<(f64, f64)> = units.iter().map(|u| (u.p_max, 0.0)).collect();
    let rep = check_dispatch_feasible(
        &net,
        &units,
        &Dispatch::from_setpoints(&units, &sp),
        &PfOptions::default(),
        1e-6,
    );
    assert!(rep.state.is_some());
    assert!(!rep.is_feasible());
    assert!(!rep.violations.is_empty());
    assert!(rep
        .violations
        .iter()
        .all(|v| matches!(v.constraint, ConstraintId::VoltageMin(_)) && v.slack < 0.0));
}
