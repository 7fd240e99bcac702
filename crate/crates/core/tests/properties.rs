use geoflow::curvature::{ansatz_tensor, lie_derivative, ricci_scalar, FlowParams};
use geoflow::flow::{mode_coefficients, perturbation, run_adjusted, single_mode_metric, RunOptions};
use geoflow::gauge::deturck_field;
use geoflow::grid::{interpolate, l2_inner, random_band_limited, spectral_derivative, Grid, MetricField, TensorField};
use geoflow::symbol::{sym_from_coords, symbol_matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_field(grid: Grid, lower: usize, upper: usize, seed: u64, amp: f64) -> TensorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_band_limited(grid, lower, upper, 1, amp, &mut rng)
}

fn random_metric(grid: Grid, seed: u64, amp: f64) -> MetricField {
    let n = grid.dim();
    // 3^n band modes, each with a cosine and a sine coefficient
    let per_coeff = amp / (2.0 * 3f64.powi(n as i32));
    let mut u = random_field(grid, 2, 0, seed, per_coeff).symmetrized();
    for node in 0..grid.nodes() {
        for i in 0..n {
            u.node_mut(node)[i * n + i] += 1.0;
        }
    }
    MetricField::new(u).unwrap()
}

fn rel(a: &TensorField, b: &TensorField) -> f64 {
    a.sub(b).unwrap().max_abs() / b.max_abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn derivative_of_constant_vanishes(n in 2usize..4, points in prop::sample::select(vec![8usize, 10, 12]), c in -10.0f64..10.0, axis in 0usize..3) {
        let grid = Grid::new(n, points).unwrap();
        let f = TensorField::scalar_fn(grid, |_| c);
        let d = spectral_derivative(&f, axis % n).unwrap();
        prop_assert!(d.max_abs() <= 1e-13);
    }

    #[test]
    fn distinct_axes_commute(seed in any::<u64>(), a in 0usize..3, b in 0usize..3) {
        prop_assume!(a != b);
        let grid = Grid::new(3, 8).unwrap();
        let f = random_field(grid, 0, 0, seed, 1.0);
        let ab = spectral_derivative(&spectral_derivative(&f, b).unwrap(), a).unwrap();
        let ba = spectral_derivative(&spectral_derivative(&f, a).unwrap(), b).unwrap();
        prop_assert!(rel(&ab, &ba) <= 1e-12);
    }

    #[test]
    fn l2_inner_is_symmetric_and_positive(seed in any::<u64>()) {
        let grid = Grid::new(2, 8).unwrap();
        let h = random_metric(grid, seed ^ 1, 0.2);
        let f = random_field(grid, 1, 1, seed, 1.0);
        let g = random_field(grid, 1, 1, seed ^ 2, 1.0);
        let fg = l2_inner(&f, &g, &h).unwrap();
        let gf = l2_inner(&g, &f, &h).unwrap();
        prop_assert!((fg - gf).abs() <= 1e-10 * fg.abs().max(1.0));
        prop_assert!(l2_inner(&f, &f, &h).unwrap() > 0.0);
    }

    #[test]
    fn interpolation_is_bit_exact_at_nodes(seed in any::<u64>(), node in 0usize..64) {
        let grid = Grid::new(2, 8).unwrap();
        let f = random_field(grid, 1, 0, seed, 1.0);
        let x = grid.coords(node);
        prop_assert_eq!(interpolate(&f, &x).unwrap(), f.node(node).to_vec());
    }

    #[test]
    fn lie_derivative_is_linear_in_the_field(seed in any::<u64>(), s in -3.0f64..3.0, t in -3.0f64..3.0) {
        let grid = Grid::new(2, 8).unwrap();
        let g = random_metric(grid, seed, 0.1);
        let w1 = random_field(grid, 0, 1, seed ^ 5, 1.0);
        let w2 = random_field(grid, 0, 1, seed ^ 6, 1.0);
        let combined = lie_derivative(&w1.scale(s).axpy(t, &w2).unwrap(), &g).unwrap();
        let separate = lie_derivative(&w1, &g).unwrap().scale(s).axpy(t, &lie_derivative(&w2, &g).unwrap()).unwrap();
        prop_assert!(combined.sub(&separate).unwrap().max_abs() <= 1e-12 * separate.max_abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn ansatz_is_symmetric_and_translation_equivariant(
        seed in any::<u64>(),
        a in -1.0f64..1.0,
        b in -1.0f64..1.0,
        shift in prop::collection::vec(-7i64..8, 3),
    ) {
        let grid = Grid::new(3, 8).unwrap();
        let params = FlowParams::new(3, 1, a, b, 0.5).unwrap();
        let g = random_metric(grid, seed, 0.1);
        let t = ansatz_tensor(&g, &params).unwrap();
        prop_assert!(t.max_asymmetry() <= 1e-10);
        let moved = MetricField::new(g.field().translated(&shift)).unwrap();
        prop_assert_eq!(ansatz_tensor(&moved, &params).unwrap(), t.translated(&shift));
    }

    #[test]
    fn curvature_scaling(seed in any::<u64>(), lam in 0.1f64..10.0) {
        let grid = Grid::new(3, 8).unwrap();
        let g = random_metric(grid, seed, 0.1);
        let scaled = MetricField::new(g.field().scale(lam)).unwrap();
        let (p, q) = (ricci_scalar(&g).unwrap(), ricci_scalar(&scaled).unwrap());
        prop_assert!(rel(&q.ricci, &p.ricci) <= 1e-10);
        prop_assert!(rel(&q.scalar, &p.scalar.scale(1.0 / lam)) <= 1e-10);
    }

    #[test]
    fn gauge_field_is_translation_equivariant(seed in any::<u64>(), shift in prop::collection::vec(-7i64..8, 3)) {
        let grid = Grid::new(3, 8).unwrap();
        let params = FlowParams::bach_type(3).unwrap();
        let g = random_metric(grid, seed, 0.1);
        let h = random_metric(grid, seed ^ 9, 0.1);
        let w = deturck_field(&g, &h, &params).unwrap();
        let tg = MetricField::new(g.field().translated(&shift)).unwrap();
        let th = MetricField::new(h.field().translated(&shift)).unwrap();
        prop_assert_eq!(deturck_field(&tg, &th, &params).unwrap(), w.translated(&shift));
    }

    #[test]
    fn small_modes_decay_at_symbol_eigenvalues(
        xi in prop::collection::vec(-2i64..3, 3),
        which in 0usize..6,
        a in 0.0f64..1.0,
        b in -1.0f64..1.0,
        c in 0.5f64..2.0,
    ) {
        prop_assume!(xi.iter().any(|&k| k != 0));
        let grid = Grid::new(3, 8).unwrap();
        let params = FlowParams::new(3, 1, a, b, c).unwrap();
        let xf: Vec<f64> = xi.iter().map(|&k| k as f64).collect();
        let eig = symbol_matrix(&params, &xf).symmetric_eigen();
        let mu = eig.eigenvalues[which];
        let eta = sym_from_coords(3, &eig.eigenvectors.column(which).into_owned());
        let dt = 0.1 / eig.eigenvalues.max();
        let steps = 8;
        let g0 = single_mode_metric(grid, &xi, &eta, 1e-5).unwrap();
        let h = MetricField::flat(grid);
        let opts = RunOptions { dt, steps, stride: 1, allow_unstable: false };
        let run = run_adjusted(&g0, &h, &params, &opts).unwrap();
        prop_assert!(run.halted.is_none());
        let amp = |i: usize| -> f64 {
            let coeffs = mode_coefficients(&perturbation(&run.states[i].g), &xi).unwrap();
            coeffs.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
        };
        let amps: Vec<f64> = (0..=steps).map(amp).collect();
        prop_assert!(amps.windows(2).all(|w| w[1] <= w[0]));
        let t = run.states[steps].t;
        let rate = -(amps[steps] / amps[0]).ln() / t;
        prop_assert!((rate - mu).abs() <= 0.05 * mu, "rate {} vs eigenvalue {}", rate, mu);
    }
}
