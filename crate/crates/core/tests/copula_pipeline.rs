//! End-to-end copula layer on simulated data.

use nalgebra::DMatrix;
use sqr_core::copula::{
    correlation_matrix, fit_copula, matheron_variogram, pseudo_observations, t_scores, CopulaFit, LagBins, Weighting,
};
use sqr_core::kernels::KernelSpec;
use sqr_core::sampler::GenerativeModel;
use sqr_core::simgen::{gen_sim2, Sim2Config};
use sqr_core::special::StudentT;
use sqr_core::sqr::{default_tau_grid, fit_surface, FitOptions, LambdaPolicy};

fn ks_uniform(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| (v - i as f64 / n).max((i + 1) as f64 / n - v))
        .fold(0.0, f64::max)
}

#[test]
fn pseudo_observations_are_nearly_uniform_and_sampling_round_trips() {
    let sim = gen_sim2(&Sim2Config::new(200, 100, 4)).unwrap();
    let kernel = KernelSpec::gaussian(0.2).unwrap();
    let taus = default_tau_grid();
    let surface = fit_surface(&sim.data, &taus, &kernel, &LambdaPolicy::Fixed(1.0), &FitOptions::default()).unwrap();
    let ps = pseudo_observations(&surface, &sim.data).unwrap();
    assert_eq!(ps.u.len(), 20_000);
    let mut all: Vec<f64> = ps.u.iter().copied().collect();
    let ks = ks_uniform(&mut all);
    assert!(ks <= 0.08, "KS distance {ks}");

    // the variogram of the pseudo-observations yields a valid copula
    let z = t_scores(&ps.u, 10.0);
    let bins = LagBins::for_grid(sim.data.grid());
    let cloud = matheron_variogram(&z, &bins, 10.0).unwrap();
    let fit = fit_copula(&cloud, sim.data.x(), 2.5, Weighting::CressieWls, None).unwrap();
    assert!(fit.alpha.iter().all(|a| a.is_finite()));

    // sampled curves reproduce the fitted marginal quantiles
    let model = GenerativeModel::new(surface, fit, sim.data.grid().clone()).unwrap();
    let x = sim.data.x_row(0);
    let draws = model.sample_y(&x, 3000, 9).unwrap();
    let curves = model.curves(&x);
    for j in [0, 50, 99] {
        let mut col: Vec<f64> = draws.y.column(j).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        let median = 0.5 * (col[1499] + col[1500]);
        let q = &curves[j];
        assert!(median >= q[44] && median <= q[54], "location {j}: median {median} outside [{}, {}]", q[44], q[54]);
    }
}

#[test]
fn sampled_t_scores_have_the_model_correlation() {
    let sim = gen_sim2(&Sim2Config::new(30, 12, 1)).unwrap();
    let kernel = KernelSpec::gaussian(0.2).unwrap();
    let taus: Vec<f64> = (1..=19).map(|k| k as f64 / 20.0).collect();
    let surface = fit_surface(&sim.data, &taus, &kernel, &LambdaPolicy::Fixed(1.0), &FitOptions::default()).unwrap();
    let copula = CopulaFit { dof: 8.0, nu: 2.5, alpha: vec![1.5, 0.0, 0.0], weighting: Weighting::CressieWls, objective: 0.0, converged: true };
    let grid = sim.data.grid().clone();
    let model = GenerativeModel::new(surface, copula.clone(), grid.clone()).unwrap();
    let x = sim.data.x_row(2);
    let n = 20_000;
    let draws = model.sample_y(&x, n, 123).unwrap();
    let t = StudentT::new(8.0);
    let z = draws.u.map(|u| t.quantile(u));
    let target = correlation_matrix(&x, &copula, &grid);
    let mean = z.row_mean();
    let centered = DMatrix::from_fn(n, grid.len(), |r, j| z[(r, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for j in 0..grid.len() {
        for k in 0..grid.len() {
            let r = cov[(j, k)] / (cov[(j, j)] * cov[(k, k)]).sqrt();
            assert!((r - target[(j, k)]).abs() <= 0.03, "({j},{k}): {r} vs {}", target[(j, k)]);
        }
    }
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let sim = gen_sim2(&Sim2Config::new(20, 8, 2)).unwrap();
    let kernel = KernelSpec::gaussian(0.2).unwrap();
    let taus: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let surface = fit_surface(&sim.data, &taus, &kernel, &LambdaPolicy::Fixed(1.0), &FitOptions::default()).unwrap();
    let copula = CopulaFit { dof: 5.0, nu: 2.5, alpha: vec![1.0, 0.2, 0.2], weighting: Weighting::CressieWls, objective: 0.0, converged: true };
    let model = GenerativeModel::new(surface, copula, sim.data.grid().clone()).unwrap();
    let x = sim.data.x_row(0);
    let a = model.sample_y(&x, 50, 7).unwrap();
    let b = model.sample_y(&x, 50, 7).unwrap();
    let c = model.sample_y(&x, 50, 8).unwrap();
    assert_eq!(a.y, b.y);
    assert_ne!(a.y, c.y);
    // sample r does not depend on how many samples are drawn
    let short = model.sample_y(&x, 10, 7).unwrap();
    assert_eq!(short.y.rows(0, 10), a.y.rows(0, 10));
}
