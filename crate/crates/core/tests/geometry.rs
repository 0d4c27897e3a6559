mod common;

use common::*;
use flexmap_core::analysis::{
    convex_hull, detect_shifts, detect_swaps, in_convex_polygon, nonconvexity_report, polygon_area,
};
use flexmap_core::flexopf::{SolveStatus, SolverOptions};
use flexmap_core::sweep::{
    boundary_of_mask, extract_boundary, heatmap_layer, refinement_losses, run_sweep, Channel,
    GridSpec, SweepMode,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[test]
fn random_disk_hull_approaches_disk_area() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pts = Vec::new();
    while pts.len() < 1000 {
        let (x, y): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if x * x + y * y <= 1.0 {
            pts.push((x, y));
        }
    }
    let area = polygon_area(&convex_hull(&pts));
    assert!(area <= PI);
    // Expected deficit for 1000 uniform points is about 0.02 π.
    assert!(area > 0.95 * PI, "{area}");
}

#[test]
fn disk_mask_boundary_area() {
    let (n, r) = (61usize, 22.0f64);
    let c = (n as f64 - 1.0) / 2.0;
    let mut mask = vec![false; n * n];
    for j in 0..n {
        for i in 0..n {
            let (x, y) = (i as f64 - c, j as f64 - c);
            mask[j * n + i] = x * x + y * y <= r * r;
        }
    }
    let b = boundary_of_mask(&mask, n, n);
    assert_eq!(b.loops.len(), 1);
    let perimeter = 2.0 * PI * r;
    assert!(
        (b.area() - PI * r * r).abs() <= perimeter,
        "{} vs {}",
        b.area(),
        PI * r * r
    );
}

#[test]
fn full_rectangle_is_convex() {
    let s = synthetic_sweep(9, 6, 1, |_, _| Some(vec![(0.0, 0.0)]));
    let rep = nonconvexity_report(&s);
    assert_eq!(rep.nonconvexity_gap, 0.0);
    assert!(rep.hull_infeasible_cells.is_empty());
    assert_eq!(rep.feasible_area, rep.hull_area);
    assert!(extract_boundary(&s).notice.is_some());
}

#[test]
fn l_shape_has_a_notch() {
    // Optimal unless both indices are in the upper half.
    let s = synthetic_sweep(10, 10, 1, |i, j| (i < 5 || j < 5).then(|| vec![(0.0, 0.0)]));
    let rep = nonconvexity_report(&s);
    assert!(rep.nonconvexity_gap > 0.0 && rep.nonconvexity_gap < 1.0);
    assert!(rep.feasible_area <= rep.hull_area);
    assert!(!rep.hull_infeasible_cells.is_empty());
    assert!(rep
        .hull_infeasible_cells
        .iter()
        .all(|&(i, j)| i >= 5 && j >= 5));
    assert!(rep.hull_infeasible_cells.contains(&(5, 5)));
}

#[test]
fn swaps_need_opposite_signs() {
    let s = synthetic_sweep(3, 1, 3, |i, _| {
        Some(match i {
            0 => vec![(0.0, 0.0); 3],
            1 => vec![(0.0, -0.5), (0.0, 0.3), (0.0, 0.0)],
            _ => vec![(0.2, 0.0), (0.4, 0.0), (0.0000001, -0.0000001)],
        })
    });
    let swaps = detect_swaps(&s, 1e-3);
    assert_eq!(swaps.len(), 1);
    assert_eq!(swaps[0].cell, (1, 0));
    assert_eq!(swaps[0].channel, Channel::Q);
    assert_eq!(swaps[0].producing, vec![0]);
    assert_eq!(swaps[0].consuming, vec![1]);
}

#[test]
fn single_unit_never_swaps_and_uniform_never_shifts() {
    let s = synthetic_sweep(5, 5, 1, |i, j| Some(vec![(i as f64 - 2.0, 2.0 - j as f64)]));
    assert!(detect_swaps(&s, 1e-3).is_empty());
    let u = synthetic_sweep(5, 5, 2, |_, _| Some(vec![(0.3, -0.1), (-0.2, 0.1)]));
    assert!(detect_shifts(&u, 0.01).is_empty());
}

#[test]
fn shifts_are_sorted_and_bounded() {
    let s = synthetic_sweep(4, 1, 2, |i, _| {
        Some(match i {
            0 => vec![(0.0, 0.0), (0.0, 0.0)],
            1 => vec![(0.1, 0.0), (0.0, 0.0)],
            2 => vec![(0.1, 0.9), (0.0, -0.4)],
            _ => vec![(-0.9, 0.9), (0.0, 0.4)],
        })
    });
    let h = detect_shifts(&s, 0.5);
    let jumps: Vec<f64> = h.iter().map(|x| x.jump).collect();
    assert_eq!(jumps, vec![-1.0, 0.9, 0.8]);
    assert_eq!(
        (h[0].from, h[0].to, h[0].unit, h[0].channel),
        ((2, 0), (3, 0), 0, Channel::P)
    );
    // Box widths of 2 per channel bound every jump.
    assert!(h.iter().all(|x| x.jump.abs() <= 4.0));
}

#[test]
fn single_unit_toy_sweep_is_smooth() {
    let net = two_bus(0.02, 0.015, 0.05, 0.02);
    let units = [unit("U", 2, 300.0, 0.3, 0.15)];
    let spec = GridSpec::around_capability(&units, 0.005, 0).unwrap();
    let s = run_sweep(
        &net,
        &units,
        spec,
        SolverOptions::default(),
        SweepMode::Full,
    )
    .unwrap();
    assert_eq!(spec.counts(), (13, 13));
    assert!(s.optimal_count() > 0);
    assert!(detect_shifts(&s, 0.5 * 0.06).is_empty());
    assert!(detect_swaps(&s, 1e-3).is_empty());
    let layer = heatmap_layer(&s, 0, Channel::P);
    let (i0, j0) = spec.nearest_cell(0.0, 0.0).unwrap();
    assert_eq!(layer[spec.index(i0, j0)], Some(0.0));
}

#[test]
fn one_cell_sweep_at_the_origin() {
    let net = two_bus(0.02, 0.015, 0.05, 0.02);
    let units = [unit("U", 2, 300.0, 0.3, 0.15)];
    let spec = GridSpec::new(0.0, 0.0, 0.0, 0.0, 0.01).unwrap();
    let s = run_sweep(
        &net,
        &units,
        spec,
        SolverOptions::default(),
        SweepMode::Full,
    )
    .unwrap();
    assert_eq!(s.cells.len(), 1);
    assert_eq!(s.cells[0].status, SolveStatus::Optimal);
    assert_eq!(s.cells[0].cost, 0.0);
}

#[test]
fn refinement_keeps_feasible_territory() {
    let net = tight_five();
    let units = [
        unit("X", 4, 300.0, 0.2, 0.1),
        unit("Y", 5, 300.0, 0.35, 0.18),
    ];
    let coarse_spec = GridSpec::around_capability(&units, 0.01, 0).unwrap();
    let fine_spec = GridSpec {
        step: 0.005,
        ..coarse_spec
    };
    let opts = SolverOptions::default();
    let coarse = run_sweep(&net, &units, coarse_spec, opts, SweepMode::Full).unwrap();
    let fine = run_sweep(&net, &units, fine_spec, opts, SweepMode::Full).unwrap();
    let lost = refinement_losses(&coarse, &fine).unwrap();
    assert!(lost.is_empty(), "{lost:?}");
    assert!(refinement_losses(&fine, &fine).is_none());
}

fn tight_five() -> flexmap_core::net::RadialNetwork {
    five_bus().with_voltage_band(0.95, 1.05).unwrap()
}

#[test]
fn swap_free_sweep_nests_in_full_sweep() {
    let net = tight_five();
    let units = [
        unit("X", 4, 300.0, 0.2, 0.1),
        unit("Y", 5, 300.0, 0.35, 0.18),
    ];
    let spec = GridSpec::around_capability(&units, 0.01, 0).unwrap();
    let opts = SolverOptions::default();
    let full = run_sweep(&net, &units, spec, opts, SweepMode::Full).unwrap();
    let sf = run_sweep(&net, &units, spec, opts, SweepMode::SwapFree).unwrap();
    for (a, b) in full.cells.iter().zip(&sf.cells) {
        if b.is_optimal() {
            assert!(a.is_optimal());
            assert!(b.cost >= a.cost * (1.0 - 1e-6));
        }
    }
}

fn point_set() -> impl Strategy<Value = Vec<(f64, f64)>> {
    proptest::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 0..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hull_is_idempotent_and_contains_inputs(pts in point_set()) {
        let h = convex_hull(&pts);
        prop_assert_eq!(convex_hull(&h), h.clone());
        for &p in &pts {
            prop_assert!(in_convex_polygon(&h, p, 1e-9), "{p:?} outside {h:?}");
        }
        for v in &h {
            prop_assert!(pts.contains(v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gap_is_a_fraction(bits in proptest::collection::vec(any::<bool>(), 48)) {
        prop_assume!(bits.iter().any(|&b| b));
        let s = synthetic_sweep(8, 6, 1, |i, j| bits[j * 8 + i].then(|| vec![(0.0, 0.0)]));
        let rep = nonconvexity_report(&s);
        prop_assert!((0.0..=1.0).contains(&rep.nonconvexity_gap));
        prop_assert!(rep.feasible_area <= rep.hull_area);
    }

    #[test]
    fn swaps_ignore_labels_and_sign(regs in proptest::collection::vec(
        proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 3), 12)) {
        let s = synthetic_sweep(4, 3, 3, |i, j| Some(regs[j * 4 + i].clone()));
        let relabelled = synthetic_sweep(4, 3, 3, |i, j| {
            let mut r = regs[j * 4 + i].clone();
            r.reverse();
            Some(r)
        });
        let flipped = synthetic_sweep(4, 3, 3, |i, j| {
            Some(regs[j * 4 + i].iter().map(|&(p, q)| (-p, -q)).collect())
        });
        let cells = |s| detect_swaps(s, 0.1).iter().map(|c| (c.cell, c.channel)).collect::<Vec<_>>();
        let base = cells(&s);
        prop_assert_eq!(&base, &cells(&relabelled));
        prop_assert_eq!(&base, &cells(&flipped));
        for c in detect_swaps(&s, 0.1) {
            let reg = |u: usize| {
                let (p, q) = regs[c.cell.1 * 4 + c.cell.0][u];
                if c.channel == Channel::P { p } else { q }
            };
            prop_assert!(c.producing.iter().all(|&u| reg(u) < -0.1));
            prop_assert!(c.consuming.iter().all(|&u| reg(u) > 0.1));
        }
    }
}
