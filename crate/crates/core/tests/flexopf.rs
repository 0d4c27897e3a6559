mod common;

use common::*;
use flexmap_core::distflow::{solve_power_flow, Injection, PfOptions};
use flexmap_core::flexopf::{
    check_dispatch_feasible, evaluate_cost, interface_sensitivities, split_regulation, Dispatch,
    FlexError, FlexProblem, FlexRequest, GradientMode, SolveStatus, SolverOptions, UnitDispatch,
};
use flexmap_core::net::FlexUnit;
use proptest::prelude::*;

#[test]
fn split_examples() {
    assert_eq!(split_regulation(0.05, 0.0), (0.05, 0.0));
    assert_eq!(split_regulation(-0.03, 0.0), (0.0, 0.03));
    let (up, dn) = split_regulation(0.02, 0.05);
    assert_eq!(up, 0.0);
    assert!((dn - 0.03).abs() < 1e-15);
}

#[test]
fn cost_examples() {
    let d = unit("D", 2, 500.0, 0.300, 0.150);
    let a = unit("A", 2, 500.0, 0.375, 0.188);
    let only_d = Dispatch {
        units: vec![UnitDispatch {
            p: -100.0 * KW,
            p_dn: 100.0 * KW,
            ..Default::default()
        }],
    };
    assert!((evaluate_cost(core::slice::from_ref(&d), &only_d) - 30.0).abs() < 1e-9);
    let only_a = Dispatch {
        units: vec![UnitDispatch {
            q: 200.0 * KW,
            q_up: 200.0 * KW,
            ..Default::default()
        }],
    };
    assert!((evaluate_cost(core::slice::from_ref(&a), &only_a) - 37.6).abs() < 1e-9);
    assert_eq!(evaluate_cost(&[a, d], &Dispatch::default()), 0.0);
}

#[test]
fn rejects_bad_options() {
    let net = five_bus();
    let units = [unit("X", 4, 300.0, 0.2, 0.1)];
    let opts = SolverOptions {
        interface_tol: 0.0,
        ..SolverOptions::default()
    };
    assert!(matches!(
        FlexProblem::new(&net, &units, opts),
        Err(FlexError::Options(_))
    ));
    let mut bad = units.clone();
    bad[0].bus = 99;
    assert!(matches!(
        FlexProblem::new(&net, &bad, SolverOptions::default()),
        Err(FlexError::Unit(_))
    ));
}

#[test]
fn zero_request_needs_no_regulation() {
    let net = five_bus();
    let units = [
        unit("X", 4, 300.0, 0.2, 0.1),
        unit("Y", 5, 300.0, 0.35, 0.18),
    ];
    let prob = FlexProblem::new(&net, &units, SolverOptions::default()).unwrap();
    let r = prob.solve(FlexRequest::default());
    assert_eq!(r.status, SolveStatus::Optimal);
    assert_eq!(r.cost, 0.0);
    assert!(r.dispatch.units.iter().all(|u| u.p == 0.0 && u.q == 0.0));
}

/// One unit behind one line: exhaustive 1 kW enumeration of the unit box.
#[test]
fn two_bus_matches_enumeration() {
    let net = two_bus(0.02, 0.015, 0.05, 0.02);
    let units = [unit("U", 2, 300.0, 0.3, 0.15)];
    let opts = SolverOptions::default();
    let prob = FlexProblem::new(&net, &units, opts).unwrap();
    for (dp, dq) in [(100.0, -50.0), (-220.0, 130.0), (0.0, 250.0)] {
        let req = FlexRequest {
            dp: dp * KW,
            dq: dq * KW,
        };
        let (tp, tq) = prob.target(req);
        let r = prob.solve(req);
        assert_eq!(r.status, SolveStatus::Optimal, "{dp},{dq}");

        let mut best = f64::INFINITY;
        for i in -300..=300 {
            for j in -300..=300 {
                let sp = [(i as f64 * KW, j as f64 * KW)];
                let o = oracle_with_units(&net, &units, &sp).unwrap();
                if (o.interface_p - tp).abs() <= opts.interface_tol
                    && (o.interface_q - tq).abs() <= opts.interface_tol
                {
                    let d = Dispatch::from_setpoints(&units, &sp);
                    best = best.min(evaluate_cost(&units, &d));
                }
            }
        }
        assert!(best.is_finite());
        assert!(
            r.cost <= best * (1.0 + 1e-2),
            "{dp},{dq}: {} vs {best}",
            r.cost
        );
        assert!(
            r.cost >= best * (1.0 - 1e-2),
            "{dp},{dq}: {} vs {best}",
            r.cost
        );
    }
}

#[test]
fn five_bus_two_units_match_enumeration() {
    let net = tight_bus(&five_bus(), 4, 0.004);
    let units = [
        unit("X", 4, 300.0, 0.2, 0.1),
        unit("Y", 5, 300.0, 0.35, 0.18),
    ];
    let opts = SolverOptions::default();
    let prob = FlexProblem::new(&net, &units, opts).unwrap();
    for (dp, dq) in [(300.0, 0.0), (150.0, 150.0), (-250.0, 100.0)] {
        let req = FlexRequest {
            dp: dp * KW,
            dq: dq * KW,
        };
        let r = prob.solve(req);
        assert_eq!(r.status, SolveStatus::Optimal, "{dp},{dq}");
        let best = two_unit_oracle(&net, &units, prob.target(req), opts.violation_tol);
        assert!(best.is_finite());
        assert!(
            r.cost <= best * (1.0 + 1e-2),
            "{dp},{dq}: {} vs {best}",
            r.cost
        );
        assert!(
            r.cost >= best * (1.0 - 1e-2),
            "{dp},{dq}: {} vs {best}",
            r.cost
        );
    }
}

#[test]
fn voltage_limit_forces_the_dearer_unit_in() {
    let net = tight_bus(&five_bus(), 4, 0.004);
    let units = [
        unit("X", 4, 300.0, 0.2, 0.1),
        unit("Y", 5, 300.0, 0.35, 0.18),
    ];
    let prob = FlexProblem::new(&net, &units, SolverOptions::default()).unwrap();
    let r = prob.solve(FlexRequest {
        dp: 300.0 * KW,
        dq: 0.0,
    });
    assert_eq!(r.status, SolveStatus::Optimal);
    assert!(r.dispatch.units[1].p > 10.0 * KW, "{:?}", r.dispatch);
    let k = net.position(4).unwrap();
    let st = r.state.as_ref().unwrap();
    assert!((st.v[k] - net.buses()[k].v_min).abs() < 1e-5);
}

#[test]
fn unreachable_request_is_infeasible() {
    let net = five_bus();
    let units = [unit("X", 4, 100.0, 0.2, 0.1)];
    let prob = FlexProblem::new(&net, &units, SolverOptions::default()).unwrap();
    let r = prob.solve(FlexRequest {
        dp: 500.0 * KW,
        dq: 0.0,
    });
    assert_eq!(r.status, SolveStatus::Infeasible);
    assert!(r.interface_error > prob.options().interface_tol);
    let r = prob.solve(FlexRequest {
        dp: f64::NAN,
        dq: 0.0,
    });
    assert_ne!(r.status, SolveStatus::Optimal);
}

#[test]
fn finite_difference_mode_agrees_with_adjoint() {
    let net = tight_bus(&five_bus(), 4, 0.004);
    let units = [
        unit("X", 4, 300.0, 0.2, 0.1),
        unit("Y", 5, 300.0, 0.35, 0.18),
    ];
    let adj = FlexProblem::new(&net, &units, SolverOptions::default()).unwrap();
    let fd_opts = SolverOptions {
        gradient: GradientMode::FiniteDifference,
        ..Default::default()
    };
    let fd = FlexProblem::new(&net, &units, fd_opts).unwrap();
    for (dp, dq) in [(300.0, 0.0), (-120.0, -80.0)] {
        let req = FlexRequest {
            dp: dp * KW,
            dq: dq * KW,
        };
        let (a, b) = (adj.solve(req), fd.solve(req));
        assert_eq!(a.status, SolveStatus::Optimal);
        assert_eq!(b.status, SolveStatus::Optimal);
        assert!(
            (a.cost - b.cost).abs() <= 1e-4 * a.cost.max(1.0),
            "{} vs {}",
            a.cost,
            b.cost
        );
    }
}

#[test]
fn swap_free_respects_common_signs() {
    let net = tight_bus(&five_bus(), 4, 0.004);
    let units = [
        unit("X", 4, 300.0, 0.2, 0.1),
        unit("Y", 5, 300.0, 0.35, 0.18),
    ];
    let prob = FlexProblem::new(&net, &units, SolverOptions::default()).unwrap();
    for (dp, dq) in [(300.0, 0.0), (-200.0, 150.0), (100.0, -250.0)] {
        let req = FlexRequest {
            dp: dp * KW,
            dq: dq * KW,
        };
        let free = prob.solve(req);
        let sf = prob.solve_swap_free(req, &[]);
        if sf.status != SolveStatus::Optimal {
            continue;
        }
        assert_eq!(free.status, SolveStatus::Optimal);
        assert!(sf.cost >= free.cost * (1.0 - 1e-6));
        let signs = |f: fn(&UnitDispatch) -> f64| {
            let ups = sf.dispatch.units.iter().any(|u| f(u) > 1e-12);
            let dns = sf.dispatch.units.iter().any(|u| f(u) < -1e-12);
            !(ups && dns)
        };
        assert!(signs(|u| u.dp()), "{:?}", sf.dispatch);
        assert!(signs(|u| u.dq()), "{:?}", sf.dispatch);
    }
}

#[test]
fn repeated_solves_are_identical() {
    let net = tight_bus(&five_bus(), 4, 0.004);
    let units = [
        unit("X", 4, 300.0, 0.2, 0.1),
        unit("Y", 5, 300.0, 0.35, 0.18),
    ];
    let prob = FlexProblem::new(&net, &units, SolverOptions::default()).unwrap();
    let req = FlexRequest {
        dp: 210.0 * KW,
        dq: -70.0 * KW,
    };
    assert_eq!(prob.solve(req), prob.solve(req));
}

fn toy_units() -> Vec<FlexUnit> {
    vec![
        unit("X", 4, 300.0, 0.2, 0.1),
        unit("Y", 5, 300.0, 0.35, 0.18),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn optimal_results_are_consistent(dp in -500.0..500.0f64, dq in -500.0..500.0f64) {
        let net = tight_bus(&five_bus(), 4, 0.004);
        let units = toy_units();
        let opts = SolverOptions::default();
        let prob = FlexProblem::new(&net, &units, opts).unwrap();
        let req = FlexRequest { dp: dp * KW, dq: dq * KW };
        let r = prob.solve(req);
        prop_assume!(r.status == SolveStatus::Optimal);
        prop_assert_eq!(r.cost, evaluate_cost(&units, &r.dispatch));
        for (u, d) in units.iter().zip(&r.dispatch.units) {
            prop_assert!(d.p_up * d.p_dn == 0.0 && d.q_up * d.q_dn == 0.0);
            prop_assert!(d.p_up >= 0.0 && d.p_dn >= 0.0 && d.q_up >= 0.0 && d.q_dn >= 0.0);
            prop_assert!((d.p_up - d.p_dn - (d.p - u.p0)).abs() < 1e-15);
            prop_assert!(d.p >= u.p_min && d.p <= u.p_max && d.q >= u.q_min && d.q <= u.q_max);
        }
        // Re-solving the returned dispatch from scratch reproduces the target.
        let rep = check_dispatch_feasible(&net, &units, &r.dispatch, &opts.pf, opts.violation_tol);
        prop_assert!(rep.is_feasible());
        let (tp, tq) = prob.target(req);
        prop_assert!((rep.interface_p - tp).abs() <= opts.interface_tol);
        prop_assert!((rep.interface_q - tq).abs() <= opts.interface_tol);
        prop_assert!(r.interface_error <= opts.interface_tol);
    }

    #[test]
    fn larger_boxes_keep_optimal_requests_optimal(dp in -500.0..500.0f64, dq in -500.0..500.0f64) {
        let net = tight_bus(&five_bus(), 4, 0.004);
        let units = toy_units();
        let prob = FlexProblem::new(&net, &units, SolverOptions::default()).unwrap();
        let req = FlexRequest { dp: dp * KW, dq: dq * KW };
        prop_assume!(prob.solve(req).status == SolveStatus::Optimal);
        let wider: Vec<FlexUnit> = units
            .iter()
            .map(|u| FlexUnit { p_min: 1.5 * u.p_min, p_max: 1.5 * u.p_max,
                                q_min: 1.5 * u.q_min, q_max: 1.5 * u.q_max, ..u.clone() })
            .collect();
        let prob2 = FlexProblem::new(&net, &wider, SolverOptions::default()).unwrap();
        prop_assert_eq!(prob2.solve(req).status, SolveStatus::Optimal);
    }

    #[test]
    fn interface_gradient_matches_central_differences(
        p in proptest::collection::vec(-0.025..0.025f64, 2),
        q in proptest::collection::vec(-0.025..0.025f64, 2),
    ) {
        let net = five_bus();
        let units = toy_units();
        let sp = [(p[0], q[0]), (p[1], q[1])];
        let d = Dispatch::from_setpoints(&units, &sp);
        let pf = PfOptions { tol: 1e-13, ..PfOptions::default() };
        let sens = interface_sensitivities(&net, &units, &d, &pf).unwrap();
        let h = 1e-6;
        let interface = |sp: &[(f64, f64)]| {
            let inj: Vec<Injection> = units.iter().zip(sp)
                .map(|(u, &(p, q))| Injection { bus: u.bus, p, q }).collect();
            let st = solve_power_flow(&net, &inj, &pf).unwrap();
            (st.interface_p, st.interface_q)
        };
        for k in 0..2 {
            for chan in 0..2 {
                let mut a = sp;
                let mut b = sp;
                if chan == 0 { a[k].0 += h; b[k].0 -= h; } else { a[k].1 += h; b[k].1 -= h; }
                let (pa, qa) = interface(&a);
                let (pb, qb) = interface(&b);
                let fd_p = (pa - pb) / (2.0 * h);
                let fd_q = (qa - qb) / (2.0 * h);
                let (an_p, an_q) = if chan == 0 { (sens[k][0], sens[k][2]) } else { (sens[k][1], sens[k][3]) };
                prop_assert!((an_p - fd_p).abs() <= 1e-4 * fd_p.abs().max(1e-3), "{an_p} vs {fd_p}");
                prop_assert!((an_q - fd_q).abs() <= 1e-4 * fd_q.abs().max(1e-3), "{an_q} vs {fd_q}");
            }
        }
    }
}
