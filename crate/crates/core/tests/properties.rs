use proptest::collection::vec;
use proptest::prelude::*;

use flowda_core::dynamics::{rk4_step, tendency, DynamicsConfig};
use flowda_core::flow::euler_integrate;
use flowda_core::grid::{default_names, denormalize, lerp_states, normalize, rmse_per_variable};
use flowda_core::obs::{observation_count, sample_locations, ObservationSet};
use flowda_core::setconv::{lift, Kernel, LiftResult, RHO_EPS};
use flowda_core::{GridState, VariableStats};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid(h: usize, w: usize, v: usize) -> impl Strategy<Value = GridState> {
    vec(-10.0..10.0f64, h * w * v).prop_map(move |vals| GridState::new(h, w, v, vals, default_names(v)).unwrap())
}

/// Up to `max` observations at integer points of an `h × w` torus.
fn points(h: usize, w: usize, max: usize) -> impl Strategy<Value = Vec<(usize, usize, f64)>> {
    vec((0..h, 0..w, -5.0..5.0f64), 1..=max)
}

fn obs_of(pts: &[(usize, usize, f64)], h: usize, w: usize, k: usize) -> ObservationSet {
    let coords = pts.iter().map(|&(i, j, _)| (i as f64, j as f64)).collect();
    let vals = pts.iter().map(|p| p.2).collect();
    ObservationSet::new(coords, vals, default_names(1))
        .unwrap()
        .populate_local_rates(k, h, w)
        .unwrap()
}

fn gauss_lift(obs: &ObservationSet, h: usize, w: usize, window: Option<usize>, l: f64) -> LiftResult {
    lift(obs, h, w, &Kernel::Gaussian { lh: l, lw: l }, window, &[0.0]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmse_is_symmetric_and_zero_on_diagonal(a in grid(3, 4, 2), b in grid(3, 4, 2)) {
        let ab = rmse_per_variable(&a, &b).unwrap();
        prop_assert_eq!(&ab, &rmse_per_variable(&b, &a).unwrap());
        prop_assert!(ab.iter().all(|r| *r >= 0.0 && r.is_finite()));
        prop_assert!(rmse_per_variable(&a, &a).unwrap().iter().all(|r| *r == 0.0));
    }

    #[test]
    fn interpolation_hits_both_endpoints(a in grid(2, 5, 1), b in grid(2, 5, 1), tau in 0.0..1.0f64) {
        prop_assert_eq!(lerp_states(&a, &b, 0.0).unwrap(), a.clone());
        prop_assert!(lerp_states(&a, &b, 1.0).unwrap().max_abs_diff(&b).unwrap() < 1e-12);
        // The path stays inside the per-point bounding interval.
        let mid = lerp_states(&a, &b, tau).unwrap();
        for ((m, x), y) in mid.values().iter().zip(a.values()).zip(b.values()) {
            prop_assert!(*m >= x.min(*y) - 1e-12 && *m <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn normalisation_round_trips(
        x in grid(2, 6, 2),
        mean in vec(-5.0..5.0f64, 2),
        std in vec(0.1..10.0f64, 2),
    ) {
        let stats = VariableStats::new(mean, std).unwrap();
        let back = denormalize(&normalize(&x, &stats).unwrap(), &stats).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn lift_of_constant_values_is_that_constant(
        pts in points(5, 7, 10),
        c in -20.0..20.0f64,
        l in 0.3..3.0f64,
    ) {
        let constant: Vec<_> = pts.iter().map(|&(i, j, _)| (i, j, c)).collect();
        let obs = obs_of(&constant, 5, 7, 5);
        let r = gauss_lift(&obs, 5, 7, Some(5), l);
        for (n, rho) in r.rho.values.iter().enumerate() {
            if *rho >= RHO_EPS {
                prop_assert!((r.x_o.values()[n] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn density_adds_over_merged_observation_sets(
        a in points(6, 6, 6),
        b in points(6, 6, 6),
        l in 0.3..3.0f64,
    ) {
        let all: Vec<_> = a.iter().chain(&b).copied().collect();
        // The Gaussian kernel ignores the local rate, so the window size used
        // for rates does not matter here.
        let (ra, rb, rab) = (
            gauss_lift(&obs_of(&a, 6, 6, 3), 6, 6, None, l),
            gauss_lift(&obs_of(&b, 6, 6, 3), 6, 6, None, l),
            gauss_lift(&obs_of(&all, 6, 6, 3), 6, 6, None, l),
        );
        for n in 0..36 {
            let sum = ra.rho.values[n] + rb.rho.values[n];
            prop_assert!((rab.rho.values[n] - sum).abs() < 1e-12 * sum.max(1.0));
        }
    }

    #[test]
    fn integer_shifts_commute_with_the_lift(
        pts in points(4, 6, 8),
        dh in 0usize..4,
        dw in 0usize..6,
        l in 0.5..2.0f64,
    ) {
        let (h, w) = (4, 6);
        let shifted: Vec<_> = pts.iter().map(|&(i, j, y)| ((i + dh) % h, (j + dw) % w, y)).collect();
        let base = gauss_lift(&obs_of(&pts, h, w, 3), h, w, Some(3), l);
        let moved = gauss_lift(&obs_of(&shifted, h, w, 3), h, w, Some(3), l);
        for i in 0..h {
            for j in 0..w {
                let src = i * w + j;
                let dst = ((i + dh) % h) * w + (j + dw) % w;
                prop_assert!((base.rho.values[src] - moved.rho.values[dst]).abs() < 1e-12);
                prop_assert!((base.x_o.values()[src] - moved.x_o.values()[dst]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_spanning_the_grid_equals_the_full_sum(pts in points(5, 5, 6), l in 0.3..3.0f64) {
        let obs = obs_of(&pts, 5, 5, 5);
        let windowed = gauss_lift(&obs, 5, 5, Some(5), l);
        let full = gauss_lift(&obs, 5, 5, None, l);
        prop_assert_eq!(windowed, full);
    }

    #[test]
    fn sampled_locations_are_distinct_and_counted(alpha in 0.05..1.0f64, seed in any::<u64>()) {
        let (h, w) = (3, 13);
        let m = observation_count(alpha, h, w).unwrap();
        prop_assert!(m >= 1 && m <= h * w);
        let locs = sample_locations(alpha, h, w, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(locs.len(), m);
        let mut sorted = locs.clone();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m);
        prop_assert!(locs.iter().all(|&(i, j)| i < h && j < w));
    }

    #[test]
    fn uniform_forcing_state_is_a_fixed_point(f in -20.0..20.0f64, w in 4usize..30) {
        let cfg = DynamicsConfig { forcing: f, ..DynamicsConfig::ring(w) };
        let x = GridState::filled(1, w, 1, f).unwrap();
        prop_assert!(tendency(&x, &cfg).unwrap().values().iter().all(|d| *d == 0.0));
        prop_assert_eq!(rk4_step(&x, &cfg).unwrap(), x);
    }

    #[test]
    fn constant_velocity_euler_telescopes(x0 in grid(1, 6, 1), d in vec(-3.0..3.0f64, 6), steps in 1usize..64) {
        let delta = x0.try_with_values(d).unwrap();
        let out = euler_integrate(&x0, steps, |_, _| Ok(delta.clone())).unwrap();
        let expected = x0.axpy(1.0, &delta).unwrap();
        prop_assert!(out.max_abs_diff(&expected).unwrap() < 1e-10);
    }
}
