//! Finite-difference divergence of the fitted values against `|Se|`, and the
//! ADMM baseline against the primal-dual solver.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqr_core::kernels::{Grid, KernelSpec};
use sqr_core::simgen::{gen_sim1, Sim1Config};
use sqr_core::sqr::{divergence, fit_quantile, fit_quantile_admm, AdmmOptions, Dataset, FitOptions};

fn fd_divergence(data: &Dataset, tau: f64, lambda: f64, kernel: &KernelSpec, h: f64) -> f64 {
    let opts = FitOptions::default();
    let base = data.y().to_vec();
    let mut total = 0.0;
    for o in 0..base.len() {
        let mut up = base.clone();
        up[o] += h;
        let mut down = base.clone();
        down[o] -= h;
        let f_up = fit_quantile(&data.with_response(up).unwrap(), tau, lambda, kernel, &opts).unwrap();
        let f_down = fit_quantile(&data.with_response(down).unwrap(), tau, lambda, kernel, &opts).unwrap();
        total += (f_up.fitted[o] - f_down.fitted[o]) / (2.0 * h);
    }
    total
}

#[test]
fn finite_difference_divergence_equals_interpolated_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kernel = KernelSpec::gaussian(0.2).unwrap();
    let mut checked = 0;
    for seed in 0.. {
        if checked == 8 {
            break;
        }
        // small designs can draw a constant binary covariate
        let Ok(sim) = gen_sim1(&Sim1Config::new(5, 5, seed)) else { continue };
        checked += 1;
        let tau = rng.random_range(0.2..0.8);
        let lambda = 10f64.powf(rng.random_range(-2.0..1.0));
        let fit = fit_quantile(&sim.data, tau, lambda, &kernel, &FitOptions::default()).unwrap();
        let fd = fd_divergence(&sim.data, tau, lambda, &kernel, 1e-6);
        let se = divergence(&fit) as f64;
        assert!((fd - se).abs() <= 0.5, "seed {seed}: fd {fd} vs |Se| {se}");
    }
}

#[test]
fn random_design_divergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = Grid::linspace(0.0, 1.0, 6);
    let x = DMatrix::from_fn(5, 2, |_, k| if k == 0 { 1.0 } else { rng.random_range(0.0..1.0) });
    let records: Vec<(usize, usize, f64)> = (0..5)
        .flat_map(|i| (0..6).filter(move |j| (i + j) % 3 != 0).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, rng.random_range(-1.0..1.0)))
        .collect();
    let data = Dataset::random(x, grid, &records).unwrap();
    let kernel = KernelSpec::gaussian(0.3).unwrap();
    let fit = fit_quantile(&data, 0.4, 0.5, &kernel, &FitOptions::default()).unwrap();
    let fd = fd_divergence(&data, 0.4, 0.5, &kernel, 1e-6);
    assert!((fd - divergence(&fit) as f64).abs() <= 0.5);
}

#[test]
fn admm_reaches_the_primal_dual_objective() {
    let kernel = KernelSpec::gaussian(0.2).unwrap();
    for (seed, tau) in [(1, 0.5), (2, 0.25)] {
        let sim = gen_sim1(&Sim1Config::new(20, 15, seed)).unwrap();
        let pd = fit_quantile(&sim.data, tau, 1.0, &kernel, &FitOptions::default()).unwrap();
        let admm = fit_quantile_admm(&sim.data, tau, 1.0, &kernel, &AdmmOptions::default()).unwrap();
        let rel = (admm.objective - pd.objective).abs() / pd.objective.abs();
        assert!(rel <= 1e-4, "relative gap {rel:e}");
        assert!(admm.objective >= pd.objective - 1e-8 * pd.objective.abs());
    }
}
