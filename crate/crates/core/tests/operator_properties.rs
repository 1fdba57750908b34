use fracmf::core_model::build_grid;
use fracmf::frac_ops::{apply_operator, cov_rh, inner_h, GridFunction, KernelMatrix, OperatorKind};
use fracmf::stats::{pairwise_sum, slot_means};
use proptest::prelude::*;

fn smooth(grid: fracmf::TimeGrid, a: f64, b: f64, c: f64) -> GridFunction {
    GridFunction::from_fn(grid, move |t| a + b * t + c * (2.0 * t).sin())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operators_are_linear(
        hurst in 0.55f64..0.95,
        a in -2.0f64..2.0, b in -2.0f64..2.0,
        f0 in -1.0f64..1.0, f1 in -1.0f64..1.0, g0 in -1.0f64..1.0, g1 in -1.0f64..1.0,
    ) {
        let grid = build_grid(64, 1.0).unwrap();
        let f = smooth(grid, f0, f1, 0.3);
        let g = smooth(grid, g0, 0.5, g1);
        let fg = GridFunction::combine(a, &f, b, &g).unwrap();
        for kind in [OperatorKind::KH, OperatorKind::KHStar] {
            let lhs = apply_operator(kind, &fg, hurst).unwrap();
            let rf = apply_operator(kind, &f, hurst).unwrap();
            let rg = apply_operator(kind, &g, hurst).unwrap();
            for i in 0..=64 {
                let rhs = a * rf.values.values()[i] + b * rg.values.values()[i];
                let scale = 1.0 + rhs.abs();
                prop_assert!((lhs.values.values()[i] - rhs).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn inner_product_is_symmetric_and_positive(
        hurst in 0.55f64..0.95,
        f0 in -1.0f64..1.0, f1 in -1.0f64..1.0, g0 in -1.0f64..1.0, g1 in -1.0f64..1.0,
    ) {
        let grid = build_grid(48, 2.0).unwrap();
        let f = smooth(grid, f0, f1, 0.7);
        let g = smooth(grid, g0, -0.4, g1);
        let fg = inner_h(&f, &g, hurst).unwrap();
        let gf = inner_h(&g, &f, hurst).unwrap();
        prop_assert!((fg - gf).abs() <= 1e-12 * (1.0 + fg.abs()));
        let ff = inner_h(&f, &f, hurst).unwrap();
        let gg = inner_h(&g, &g, hurst).unwrap();
        prop_assert!(ff >= 0.0 && gg >= 0.0);
        prop_assert!(fg * fg <= ff * gg * (1.0 + 1e-10) + 1e-14);
    }

    #[test]
    fn indicator_covariance_matches_closed_form(hurst in 0.51f64..0.99, i in 0usize..=32, j in 0usize..=32) {
        let grid = build_grid(32, 1.0).unwrap();
        let got = inner_h(&GridFunction::indicator(grid, i), &GridFunction::indicator(grid, j), hurst).unwrap();
        let exact = cov_rh(grid.t(i), grid.t(j), hurst);
        prop_assert!((got - exact).abs() <= 1e-12);
    }

    #[test]
    fn kernel_solve_inverts_increments(hurst in 0.55f64..0.95, seed in 0u64..1000, m in 1usize..=24) {
        let grid = build_grid(24, 1.0).unwrap();
        let km = KernelMatrix::new(grid, hurst).unwrap();
        let rhs: Vec<f64> = (0..24).map(|i| ((i as u64 * 7919 + seed) % 97) as f64 / 50.0 - 1.0).collect();
        let u = km.solve(&rhs, m);
        prop_assert!(u[m..].iter().all(|v| *v == 0.0));
        let back = km.increments(&u);
        for i in 0..m {
            prop_assert!((back[i] - rhs[i]).abs() <= 1e-9 * (1.0 + rhs[i].abs()));
        }
    }

    #[test]
    fn slot_means_are_pool_independent(count in 1usize..3000, width in 1usize..4) {
        let fill = |p: usize, buf: &mut [f64]| {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = ((p * 31 + k * 17) % 101) as f64 * 1e-3 + 1e6 * (k as f64);
            }
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| slot_means(count, width, fill));
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| slot_means(count, width, fill));
        prop_assert_eq!(one, three);
    }

    #[test]
    fn pairwise_sum_is_accurate(xs in proptest::collection::vec(-1e3f64..1e3, 0..500)) {
        let exact: f64 = xs.iter().map(|&x| x as f64).sum();
        let tol = 1e-10 * xs.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        prop_assert!((pairwise_sum(&xs) - exact).abs() <= tol);
    }
}
