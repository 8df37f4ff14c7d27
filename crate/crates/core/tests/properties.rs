//! Randomized invariants of fits, surfaces, pseudo-observations and the
//! sampler.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqr_core::copula::{matheron_variogram, pseudo_observations, CopulaFit, LagBins, Weighting};
use sqr_core::kernels::{Grid, KernelSpec};
use sqr_core::sampler::GenerativeModel;
use sqr_core::sqr::{coefficients, fit_quantile, fit_surface, predict, Dataset, FitOptions, LambdaPolicy};

fn random_data(seed: u64, n: usize, m: usize, p: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::linspace(0.0, 1.0, m);
    let x = DMatrix::from_fn(n, p, |_, k| if k == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let y = DMatrix::from_fn(n, m, |i, j| {
        let s = j as f64 / (m - 1) as f64;
        (3.0 * s).sin() + x[(i, p - 1)] * s + rng.random_range(-0.5..0.5)
    });
    Dataset::fixed(x, &y, grid).unwrap()
}

/// Largest gap between the empirical CDF and the uniform CDF.
fn ks_uniform(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| (v - i as f64 / n).max((i + 1) as f64 / n - v))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn fit_satisfies_kkt_conditions(
        seed in 0u64..1000,
        n in 4usize..10,
        m in 3usize..8,
        p in 1usize..3,
        tau in 0.1f64..0.9,
        log_lambda in -2.0f64..2.0,
    ) {
        let data = random_data(seed, n, m, p);
        let lambda = 10f64.powf(log_lambda);
        let kernel = KernelSpec::gaussian(0.3).unwrap();
        let fit = fit_quantile(&data, tau, lambda, &kernel, &FitOptions::default()).unwrap();
        prop_assert!(fit.converged);
        let (lo, hi) = (-(1.0 - tau), tau);
        prop_assert!(fit.dual.iter().all(|d| *d >= lo && *d <= hi));

        // stationarity in mu
        let ymax = data.y().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(fit.stationarity <= 1e-6 * (1.0 + ymax), "stationarity {}", fit.stationarity);

        // complementary slackness and interpolation on Se
        let margin = 1e-6;
        for (o, (y, f)) in data.y().iter().zip(&fit.fitted).enumerate() {
            let r = y - f;
            if r > fit.interp_tol {
                prop_assert!((fit.dual[o] - hi).abs() <= margin);
            } else if r < -fit.interp_tol {
                prop_assert!((fit.dual[o] - lo).abs() <= margin);
            }
        }
        for &o in &fit.interior {
            prop_assert!((data.y()[o] - fit.fitted[o]).abs() <= fit.interp_tol);
        }

        // b_kj = (1/lambda) sum_i d_ij x_ik
        let d = fit.dual_matrix();
        let b = data.x().transpose() * d / lambda;
        prop_assert!((&b - &fit.b).amax() <= 1e-8);

        // predictions agree with the coefficient functions
        let beta = coefficients(&fit, data.grid());
        for i in 0..n {
            let xi = data.x_row(i);
            for j in 0..m {
                let direct = predict(&fit, &xi, data.grid().point(j));
                let via: f64 = (0..p).map(|k| xi[k] * beta[(k, j)]).sum();
                prop_assert!((direct - via).abs() <= 1e-12 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn median_fit_is_sign_equivariant(seed in 0u64..1000, log_lambda in -1.0f64..1.0) {
        let data = random_data(seed, 6, 5, 2);
        let kernel = KernelSpec::gaussian(0.3).unwrap();
        let lambda = 10f64.powf(log_lambda);
        let neg = data.with_response(data.y().iter().map(|v| -v).collect()).unwrap();
        let a = fit_quantile(&data, 0.5, lambda, &kernel, &FitOptions::default()).unwrap();
        let b = fit_quantile(&neg, 0.5, lambda, &kernel, &FitOptions::default()).unwrap();
        prop_assert!((a.objective - b.objective).abs() <= 1e-7 * (1.0 + a.objective));
    }

    #[test]
    fn surface_is_monotone_and_pseudo_levels_are_bounded(seed in 0u64..1000) {
        let data = random_data(seed, 8, 6, 2);
        let kernel = KernelSpec::gaussian(0.3).unwrap();
        let taus: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
        let surface = fit_surface(&data, &taus, &kernel, &LambdaPolicy::Fixed(0.5), &FitOptions::default()).unwrap();
        prop_assert!(surface.monotonized);
        for o in 0..data.n_obs() {
            let q = surface.training_quantiles(o);
            prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        }
        let ps = pseudo_observations(&surface, &data).unwrap();
        prop_assert!(ps.u.iter().all(|u| *u >= ps.eps && *u <= 1.0 - ps.eps));
    }

    #[test]
    fn matheron_is_translation_invariant_and_quadratic(seed in 0u64..1000, shift in -5.0f64..5.0, c in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::linspace(0.0, 1.0, 9);
        let bins = LagBins::for_grid(&grid);
        let z = DMatrix::from_fn(3, 9, |_, _| rng.random_range(-2.0..2.0));
        let base = matheron_variogram(&z, &bins, 6.0).unwrap();
        let moved = matheron_variogram(&z.add_scalar(shift), &bins, 6.0).unwrap();
        let scaled = matheron_variogram(&(&z * c), &bins, 6.0).unwrap();
        prop_assert!((&base.values - &moved.values).amax() <= 1e-10);
        prop_assert!((&base.values * (c * c) - &scaled.values).amax() <= 1e-10);
    }
}

#[test]
fn sampler_marginals_are_uniform() {
    let data = random_data(5, 12, 6, 2);
    let kernel = KernelSpec::gaussian(0.3).unwrap();
    let taus: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).collect();
    let surface = fit_surface(&data, &taus, &kernel, &LambdaPolicy::Fixed(0.5), &FitOptions::default()).unwrap();
    for (dof, alpha) in [(4.0, vec![1.0, 0.5]), (25.0, vec![2.0, -0.5])] {
        let copula = CopulaFit { dof, nu: 2.5, alpha, weighting: Weighting::CressieWls, objective: 0.0, converged: true };
        let model = GenerativeModel::new(surface.clone(), copula, data.grid().clone()).unwrap();
        let draws = model.sample_y(&data.x_row(3), 4000, 17).unwrap();
        // 1% critical value of the one-sample KS statistic
        let crit = 1.63 / (4000f64).sqrt();
        for j in 0..6 {
            let mut col: Vec<f64> = draws.u.column(j).iter().copied().collect();
            let d = ks_uniform(&mut col);
            assert!(d <= crit, "dof {dof}, location {j}: KS {d}");
        }
    }
}
