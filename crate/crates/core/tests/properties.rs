use contact_core::contact::{run_contact, RunParams};
use contact_core::hierarchy::{
    apply_l_hat, apply_l_hat_with, evolve_correlations, semigroup_apply, CorrelationState,
    EvolveOptions, Exterior, PairArray,
};
use contact_core::kernel_io::{read_kernel, write_kernel};
use contact_core::space::{
    build_lattice_kernel, build_tree_kernel, verify_criticality, BoundaryMode, KernelSpace,
    LatticeSpec,
};
use contact_core::walk::{estimate_transience_integral, pair_integral, simulate_jump_process};
use proptest::prelude::*;

fn lattice(d: usize, side: usize, boundary: BoundaryMode) -> KernelSpace {
    build_lattice_kernel(&LatticeSpec::new(d, side, boundary)).unwrap()
}

fn small_space() -> impl Strategy<Value = KernelSpace> {
    prop_oneof![
        (1usize..=3, 2usize..=5).prop_map(|(d, s)| lattice(d, s, BoundaryMode::Periodic)),
        (1usize..=2, 3usize..=6).prop_map(|(d, s)| lattice(d, s, BoundaryMode::Absorbing)),
        (1usize..=2, 3usize..=6).prop_map(|(d, s)| lattice(d, s, BoundaryMode::Reflecting)),
        (3usize..=4, 1usize..=3).prop_map(|(k, depth)| build_tree_kernel(k, depth, BoundaryMode::Absorbing).unwrap()),
    ]
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn built_kernels_are_critical_and_constants_harmonic(space in small_space(), c in 0.0f64..5.0) {
        prop_assert!(verify_criticality(&space, 1e-9).passes);
        let n = space.len();
        let bath = Exterior::Bath { rho: c };
        prop_assert!(sup(&apply_l_hat_with(&space, 1, &vec![c; n], bath).unwrap()) <= 1e-12 * (1.0 + c));
        prop_assert!(sup(&apply_l_hat_with(&space, 2, &vec![c * c; n * n], bath).unwrap()) <= 1e-12 * (1.0 + c * c));
    }

    #[test]
    fn pair_operator_preserves_symmetry(space in small_space(), seed in 0u64..1000) {
        let n = space.len();
        let k = PairArray::from_fn(n, |x, y| (((x * y) as u64 + seed) as f64 * 0.731).sin() + ((x + y) as f64).cos());
        let out = apply_l_hat(&space, 2, &k.data).unwrap();
        let out = PairArray { n, data: out };
        prop_assert!(out.asymmetry() < 1e-12);
    }

    #[test]
    fn semigroup_keeps_nonnegative_data_nonnegative(space in small_space(), t in 0.0f64..6.0, seed in 0u64..1000) {
        let n = space.len();
        let k: Vec<f64> = (0..n * n).map(|i| if (i as u64 + seed) % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let g = semigroup_apply(&space, 2, &k, t).unwrap();
        prop_assert!(g.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn rk4_agrees_with_propagator(space in small_space(), t in 0.1f64..3.0) {
        let n = space.len();
        let k1: Vec<f64> = (0..n).map(|i| (i % 4) as f64).collect();
        let state = CorrelationState { time: 0.0, k1: k1.clone(), k2: None, f2: None };
        let evo = evolve_correlations(&space, &state, t, &EvolveOptions::default()).unwrap();
        let exact = semigroup_apply(&space, 1, &k1, t).unwrap();
        for (a, b) in evo.state.k1.iter().zip(&exact) {
            prop_assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn pair_integral_matches_fine_quadrature(side in 3usize..8, seed in 0u64..500) {
        let space = lattice(1, side, BoundaryMode::Periodic);
        let horizon = 6.0;
        let px = simulate_jump_process(&space, 0, horizon, seed).unwrap();
        let py = simulate_jump_process(&space, side / 2, horizon, seed + 10_000).unwrap();
        let values = pair_integral(&space, &px, &py, &[2.0, 6.0]);
        prop_assert!(values[0] <= values[1]);
        let steps = 120_000;
        let h = horizon / steps as f64;
        let mut riemann = 0.0;
        for i in 0..steps {
            let t = (i as f64 + 0.5) * h;
            if let (Some(x), Some(y)) = (px.site_at(t), py.site_at(t)) {
                riemann += space.a(x, y) * h;
            }
        }
        prop_assert!((values[1] - riemann).abs() < 1e-3, "{} vs {riemann}", values[1]);
    }

    #[test]
    fn kernel_files_round_trip(space in small_space()) {
        let mut buf = Vec::new();
        write_kernel(&space, &mut buf).unwrap();
        let back = read_kernel(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), space.len());
        prop_assert_eq!(back.kernel().triplets().collect::<Vec<_>>(), space.kernel().triplets().collect::<Vec<_>>());
        prop_assert_eq!(back.exterior_out(), space.exterior_out());
        prop_assert_eq!(back.boundary(), space.boundary());
    }
}

#[test]
fn partial_integrals_are_monotone_in_the_horizon() {
    let space = lattice(2, 6, BoundaryMode::Periodic);
    let horizons = [1.0, 2.0, 4.0, 8.0];
    let report = estimate_transience_integral(&space, &[(0, 1), (0, 7)], &horizons, 200, 17).unwrap();
    for pair in &report.pairs {
        assert!(pair.i_hat.windows(2).all(|w| w[1] >= w[0]));
    }
}

#[test]
fn same_seed_same_trajectory() {
    let space = build_tree_kernel(3, 5, BoundaryMode::Reflecting).unwrap();
    let params = RunParams::new(1.0, 5.0, 99).observe_every(0.5);
    let a = run_contact(&space, &params, 3).unwrap();
    let b = run_contact(&space, &params, 3).unwrap();
    assert_eq!(a.counts, b.counts);
    assert_eq!(a.events, b.events);
    let c = run_contact(&space, &params, 4).unwrap();
    assert_ne!((a.counts, a.events), (c.counts, c.events));
}
