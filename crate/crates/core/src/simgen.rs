//! Seeded generators for the two simulation designs and the error metrics
//! used to score coefficient and quantile-level recovery.
//!
//! Both designs draw covariates `x = (1, Bernoulli(0.5), Uniform(0, 1))` on
//! an evenly spaced grid over `[0, 1]`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};

use crate::error::{Result, SqrError};
use crate::kernels::{matern, Grid};
use crate::special::{norm_cdf, norm_quantile};
use crate::sqr::Dataset;

/// Noise scenario for the additive-error design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLevel {
    /// Squared-exponential `v` plus `N(0, noise_var)`.
    Moderate,
    /// Same `v`, white noise variance 0.4.
    High,
    /// Matérn `v` (`alpha = 0.5`, `nu = 2.5`) plus `N(0, 0.4)`.
    Matern,
}

/// Settings for the additive-error design.
#[derive(Debug, Clone)]
pub struct Sim1Config {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    /// Variance of the correlated component `v`.
    pub a: f64,
    /// Length scale of `v`'s squared-exponential covariance.
    pub bandwidth: f64,
    /// Variance of the white-noise component.
    pub noise_var: f64,
    /// Quantile level at which the error is centred.
    pub tau: f64,
    pub noise: NoiseLevel,
}

impl Sim1Config {
    pub fn new(n: usize, m: usize, seed: u64) -> Self {
        Self {
            n,
            m,
            seed,
            a: 0.6,
            bandwidth: 0.8,
            noise_var: 0.1,
            tau: 0.5,
            noise: NoiseLevel::Moderate,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 3 || self.m < 2 {
            return Err(SqrError::InvalidInput(format!(
                "need n >= 3 and m >= 2, got n = {}, m = {}",
                self.n, self.m
            )));
        }
        if !(self.a > 0.0 && self.bandwidth > 0.0 && self.noise_var >= 0.0) {
            return Err(SqrError::InvalidInput(
                "a and bandwidth must be positive, noise variance nonnegative".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(SqrError::InvalidInput(format!("tau = {} outside (0, 1)", self.tau)));
        }
        Ok(())
    }

    /// White-noise variance actually used by the scenario.
    pub fn effective_noise_var(&self) -> f64 {
        match self.noise {
            NoiseLevel::Moderate => self.noise_var,
            NoiseLevel::High | NoiseLevel::Matern => 0.4,
        }
    }

    /// Marginal variance of `eta(s) = v(s) + eps(s)`.
    pub fn marginal_var(&self) -> f64 {
        self.a + self.effective_noise_var()
    }

    /// Covariance of `v` between two locations.
    pub fn v_cov(&self, s: f64, t: f64) -> f64 {
        match self.noise {
            NoiseLevel::Moderate | NoiseLevel::High => {
                let z = (s - t) / self.bandwidth;
                self.a * (-z * z).exp()
            }
            NoiseLevel::Matern => self.a * matern((s - t).abs(), 0.5, 2.5),
        }
    }
}

/// True coefficient functions of the additive-error design.
pub fn sim1_beta(s: f64) -> [f64; 3] {
    [
        5.0 * s * s,
        2.0 * (1.0 - s).powi(4),
        2.0 + 20.0 * (6.0 * s).sin() + 2.0 * s.powi(3),
    ]
}

/// One draw of the additive-error design.
#[derive(Debug, Clone)]
pub struct Sim1 {
    pub data: Dataset,
    /// `3 x m` true coefficients on the grid.
    pub beta: DMatrix<f64>,
    /// `n x m` centred errors `eta(s, tau)`.
    pub eta: DMatrix<f64>,
}

/// Additive-error design with the moderate noise level of `cfg`.
pub fn gen_sim1(cfg: &Sim1Config) -> Result<Sim1> {
    cfg.validate()?;
    let grid = Grid::linspace(0.0, 1.0, cfg.m);
    let s: Vec<f64> = grid.points().map(|p| p[0]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let x = draw_covariates(&mut rng, cfg.n);
    let cov = DMatrix::from_fn(cfg.m, cfg.m, |j, l| cfg.v_cov(s[j], s[l]));
    let root = covariance_root(&cov);
    let shift = cfg.marginal_var().sqrt() * norm_quantile(cfg.tau);
    let sd = cfg.effective_noise_var().sqrt();

    let beta = DMatrix::from_fn(3, cfg.m, |k, j| sim1_beta(s[j])[k]);
    let mut eta = DMatrix::zeros(cfg.n, cfg.m);
    let mut y = DMatrix::zeros(cfg.n, cfg.m);
    for i in 0..cfg.n {
        let v = &root * standard_normals(&mut rng, cfg.m);
        for j in 0..cfg.m {
            let eps: f64 = rng.sample(StandardNormal);
            let e = v[j] + sd * eps - shift;
            eta[(i, j)] = e;
            y[(i, j)] = (0..3).map(|k| x[(i, k)] * beta[(k, j)]).sum::<f64>() + e;
        }
    }
    Ok(Sim1 {
        data: Dataset::fixed(x, &y, grid)?,
        beta,
        eta,
    })
}

/// Additive-error design with the noise scenario replaced by `level`.
pub fn gen_noise_variants(cfg: &Sim1Config, level: NoiseLevel) -> Result<Sim1> {
    let cfg = Sim1Config {
        noise: level,
        ..cfg.clone()
    };
    gen_sim1(&cfg)
}

/// Settings for the copula design.
#[derive(Debug, Clone)]
pub struct Sim2Config {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub nu: f64,
    pub alpha: [f64; 3],
}

impl Sim2Config {
    pub fn new(n: usize, m: usize, seed: u64) -> Self {
        Self {
            n,
            m,
            seed,
            nu: 2.5,
            alpha: [0.8; 3],
        }
    }
}

/// Location coefficients `beta^mu(s)`.
pub fn sim2_beta_mu(s: f64) -> [f64; 3] {
    [1.0 + s, (2.0 * std::f64::consts::PI * s).sin() + 1.5, s * s + 0.5]
}

/// Scale coefficients `beta^sigma(s)`, all positive on `[0, 1]`.
pub fn sim2_beta_sigma(s: f64) -> [f64; 3] {
    [0.3 + 0.2 * s, 0.2, 0.1 + 0.1 * s]
}

/// True `tau`-quantile coefficients: `beta^mu + beta^sigma Phi^{-1}(tau)`.
pub fn sim2_beta(tau: f64, s: f64) -> [f64; 3] {
    let z = norm_quantile(tau);
    let mu = sim2_beta_mu(s);
    let sg = sim2_beta_sigma(s);
    [mu[0] + sg[0] * z, mu[1] + sg[1] * z, mu[2] + sg[2] * z]
}

/// One draw of the copula design.
#[derive(Debug, Clone)]
pub struct Sim2 {
    pub data: Dataset,
    /// `n x m` conditional means.
    pub mean: DMatrix<f64>,
    /// `n x m` conditional standard deviations.
    pub sd: DMatrix<f64>,
    /// `n x m` latent Gaussian field `Phi^{-1}(U)`.
    pub z: DMatrix<f64>,
    /// `n x m` true quantile levels `U = F(Y)`.
    pub u: DMatrix<f64>,
    pub alpha: [f64; 3],
    pub nu: f64,
}

impl Sim2 {
    /// True conditional quantile of subject `i` at grid point `j`.
    pub fn true_quantile(&self, i: usize, j: usize, tau: f64) -> f64 {
        self.mean[(i, j)] + self.sd[(i, j)] * norm_quantile(tau)
    }

    /// `3 x m` true coefficients at level `tau`.
    pub fn beta(&self, tau: f64) -> DMatrix<f64> {
        let grid = self.data.grid();
        DMatrix::from_fn(3, grid.len(), |k, j| sim2_beta(tau, grid.point(j)[0])[k])
    }
}

/// Copula design: Gaussian-copula field with Matérn correlation whose scale
/// is `exp(alpha' x)`, pushed through normal marginals.
pub fn gen_sim2(cfg: &Sim2Config) -> Result<Sim2> {
    if cfg.n < 3 || cfg.m < 2 {
        return Err(SqrError::InvalidInput(format!(
            "need n >= 3 and m >= 2, got n = {}, m = {}",
            cfg.n, cfg.m
        )));
    }
    if !(cfg.nu > 0.0) || cfg.alpha.iter().any(|a| !a.is_finite()) {
        return Err(SqrError::InvalidInput("nu must be positive and alpha finite".into()));
    }
    let grid = Grid::linspace(0.0, 1.0, cfg.m);
    let s: Vec<f64> = grid.points().map(|p| p[0]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = draw_covariates(&mut rng, cfg.n);

    let mut mean = DMatrix::zeros(cfg.n, cfg.m);
    let mut sd = DMatrix::zeros(cfg.n, cfg.m);
    let mut z = DMatrix::zeros(cfg.n, cfg.m);
    let mut u = DMatrix::zeros(cfg.n, cfg.m);
    let mut y = DMatrix::zeros(cfg.n, cfg.m);
    for i in 0..cfg.n {
        let xi = [x[(i, 0)], x[(i, 1)], x[(i, 2)]];
        let scale = (0..3).map(|k| cfg.alpha[k] * xi[k]).sum::<f64>().exp();
        let corr = DMatrix::from_fn(cfg.m, cfg.m, |j, l| matern((s[j] - s[l]).abs(), scale, cfg.nu));
        let zi = covariance_root(&corr) * standard_normals(&mut rng, cfg.m);
        for j in 0..cfg.m {
            let bm = sim2_beta_mu(s[j]);
            let bs = sim2_beta_sigma(s[j]);
            let mu: f64 = (0..3).map(|k| xi[k] * bm[k]).sum();
            let sg: f64 = (0..3).map(|k| xi[k] * bs[k]).sum();
            mean[(i, j)] = mu;
            sd[(i, j)] = sg;
            z[(i, j)] = zi[j];
            u[(i, j)] = norm_cdf(zi[j]);
            y[(i, j)] = mu + sg * zi[j];
        }
    }
    Ok(Sim2 {
        data: Dataset::fixed(x, &y, grid)?,
        mean,
        sd,
        z,
        u,
        alpha: cfg.alpha,
        nu: cfg.nu,
    })
}

/// Root mean integrated squared error over the grid.
pub fn rmise(beta_hat: &[f64], beta_true: &[f64]) -> f64 {
    assert_eq!(beta_hat.len(), beta_true.len(), "rmise needs equal lengths");
    let m = beta_hat.len() as f64;
    let ss: f64 = beta_hat
        .iter()
        .zip(beta_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (ss / m).sqrt()
}

/// Per-coefficient RMISE for `p x m` matrices.
pub fn rmise_rows(beta_hat: &DMatrix<f64>, beta_true: &DMatrix<f64>) -> Vec<f64> {
    assert_eq!(beta_hat.shape(), beta_true.shape());
    (0..beta_hat.nrows())
        .map(|k| {
            let a: Vec<f64> = beta_hat.row(k).iter().copied().collect();
            let b: Vec<f64> = beta_true.row(k).iter().copied().collect();
            rmise(&a, &b)
        })
        .collect()
}

/// Sum of the per-coefficient RMISEs.
pub fn srmise(beta_hat: &DMatrix<f64>, beta_true: &DMatrix<f64>) -> f64 {
    rmise_rows(beta_hat, beta_true).iter().sum()
}

/// Mean over subjects of the grid-averaged L2 distance between two `n x m`
/// matrices of quantile levels.
pub fn level_distance(u_true: &DMatrix<f64>, u_hat: &DMatrix<f64>) -> f64 {
    assert_eq!(u_true.shape(), u_hat.shape());
    let (n, m) = u_true.shape();
    let total: f64 = (0..n)
        .map(|i| {
            let ss: f64 = (0..m).map(|j| (u_true[(i, j)] - u_hat[(i, j)]).powi(2)).sum();
            (ss / m as f64).sqrt()
        })
        .sum();
    total / n as f64
}

fn draw_covariates(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let mut x = DMatrix::zeros(n, 3);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = if coin.sample(rng) { 1.0 } else { 0.0 };
        x[(i, 2)] = rng.random::<f64>();
    }
    x
}

fn standard_normals(rng: &mut ChaCha8Rng, m: usize) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_fn(m, |_, _| rng.sample(StandardNormal))
}

/// Symmetric square root `U diag(sqrt(max(l, 0)))` of a covariance matrix.
/// Tolerates the numerically indefinite matrices produced by smooth kernels
/// on dense grids.
pub fn covariance_root(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let mut root = eig.eigenvectors;
    for (k, mut col) in root.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[k].max(0.0).sqrt();
    }
    root
}
