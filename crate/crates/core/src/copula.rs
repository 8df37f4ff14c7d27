//! Copula layer: pseudo-observations from the dual variables, Matheron
//! variograms of the t-transformed field, weighted least-squares fitting of the
//! covariate-dependent Matérn range, and degrees-of-freedom selection.

use std::collections::HashMap;

use argmin::core::{CostFunction, Error as ArgminError, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SqrError};
use crate::kernels::{matern, Grid};
use crate::special::{t_copula_ln_density_z, StudentT};
use crate::sqr::{Dataset, QuantileSurface};

/// Estimated quantile levels `U~` of the training observations.
#[derive(Debug, Clone)]
pub struct PseudoObs {
    /// `n x m`, entries in `[eps, 1 - eps]`.
    pub u: DMatrix<f64>,
    pub taus: Vec<f64>,
    pub eps: f64,
}

/// Integrates `d~(tau) = d + (1 - tau)` over `(0, 1)` for one observation.
///
/// `quantiles[k]` is the fitted `taus[k]` quantile at the observation and
/// `duals[k]` its dual variable. Where `|y - quantiles[k]| > tol` the sign of
/// the residual decides `d~ = 1` (above) or `0` (below); inside the band the
/// dual is used, or `1/2` when no duals are given. The end intervals
/// `(0, tau_1)` and `(tau_K, 1)` take `d~ = 1` when `y` is at or above the
/// extreme fit and `0` otherwise.
pub fn pseudo_level(taus: &[f64], quantiles: &[f64], duals: Option<&[f64]>, y: f64, tol: f64) -> f64 {
    let k = taus.len();
    assert!(k > 0 && quantiles.len() == k, "one quantile per tau");
    let level = |t: usize| {
        let r = y - quantiles[t];
        if r > tol {
            1.0
        } else if r < -tol {
            0.0
        } else {
            duals.map_or(0.5, |d| (d[t] + 1.0 - taus[t]).clamp(0.0, 1.0))
        }
    };
    let values: Vec<f64> = (0..k).map(level).collect();
    let first = if y - quantiles[0] >= -tol { 1.0 } else { 0.0 };
    let last = if y - quantiles[k - 1] > tol { 1.0 } else { 0.0 };
    let mut total = first * taus[0] + last * (1.0 - taus[k - 1]);
    for t in 0..k - 1 {
        total += 0.5 * (taus[t + 1] - taus[t]) * (values[t] + values[t + 1]);
    }
    total
}

/// `U~_ij` for every training observation of a fixed-design dataset.
pub fn pseudo_observations(surface: &QuantileSurface, data: &Dataset) -> Result<PseudoObs> {
    if !data.is_fixed() {
        return Err(SqrError::InvalidInput("pseudo-observations need a fixed design".into()));
    }
    let (n, m, n_obs) = (data.n(), data.m(), data.n_obs());
    for (t, f) in surface.fits.iter().enumerate() {
        if f.dual.len() != n_obs || f.fitted.len() != n_obs {
            return Err(SqrError::InvalidInput(format!(
                "fit at tau = {} does not belong to this dataset",
                surface.taus[t]
            )));
        }
    }
    let k = surface.taus.len();
    let eps = 1.0 / (2.0 * k as f64);
    let y = data.y();
    let mut u = DMatrix::zeros(n, m);
    let mut q = vec![0.0; k];
    let mut d = vec![0.0; k];
    for o in 0..n_obs {
        for (t, f) in surface.fits.iter().enumerate() {
            q[t] = f.fitted[o];
            d[t] = f.dual[o];
        }
        let tol = surface.fits[0].interp_tol;
        let v = pseudo_level(&surface.taus, &q, Some(&d), y[o], tol);
        u[(o / m, o % m)] = v.clamp(eps, 1.0 - eps);
    }
    Ok(PseudoObs { u, taus: surface.taus.clone(), eps })
}

/// `t_dof^{-1}(U~)` elementwise.
pub fn t_scores(u: &DMatrix<f64>, dof: f64) -> DMatrix<f64> {
    let dist = StudentT::new(dof);
    let mut cache: HashMap<u64, f64> = HashMap::new();
    u.map(|v| *cache.entry(v.to_bits()).or_insert_with(|| dist.quantile(v)))
}

/// Location pairs grouped by lag.
#[derive(Debug, Clone, PartialEq)]
pub struct LagBins {
    pub centers: Vec<f64>,
    pub pairs: Vec<Vec<(usize, usize)>>,
}

impl LagBins {
    /// Exact lags on an evenly spaced line, 15 equal-width bins otherwise.
    pub fn for_grid(grid: &Grid) -> Self {
        match grid.regular_spacing() {
            Some(step) => Self::exact_lags(grid, step),
            None => {
                let max = 0.5 * grid.diameter();
                Self::equal_width(grid, 15, max).unwrap_or(LagBins { centers: vec![], pairs: vec![] })
            }
        }
    }

    /// Integer multiples of `step` up to `m / 2` on a one-dimensional grid.
    pub fn exact_lags(grid: &Grid, step: f64) -> Self {
        let m = grid.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| grid.point(a)[0].total_cmp(&grid.point(b)[0]));
        let lags = m / 2;
        let centers = (1..=lags).map(|k| k as f64 * step).collect();
        let pairs = (1..=lags)
            .map(|k| (0..m - k).map(|j| (order[j], order[j + k])).collect())
            .collect();
        LagBins { centers, pairs }
    }

    /// `count` bins of equal width covering `(0, max_lag]`.
    pub fn equal_width(grid: &Grid, count: usize, max_lag: f64) -> Result<Self> {
        if count == 0 || !(max_lag > 0.0) {
            return Err(SqrError::InvalidInput("lag bins need positive width".into()));
        }
        let width = max_lag / count as f64;
        let mut pairs = vec![Vec::new(); count];
        let m = grid.len();
        for j in 0..m {
            for k in j + 1..m {
                let h = grid.distance(j, k);
                if h > 0.0 && h <= max_lag {
                    let b = ((h / width).ceil() as usize).clamp(1, count) - 1;
                    pairs[b].push((j, k));
                }
            }
        }
        let centers = (0..count).map(|b| (b as f64 + 0.5) * width).collect();
        Ok(LagBins { centers, pairs })
    }
}

/// Per-subject empirical variograms on shared lag bins.
#[derive(Debug, Clone)]
pub struct VariogramCloud {
    pub lags: Vec<f64>,
    /// Pair counts `|N(h_k)|`, used as weights.
    pub weights: Vec<f64>,
    /// `n x K` values of `2 gamma_hat(h_k)`.
    pub values: DMatrix<f64>,
    pub dof: f64,
    /// Centers of bins dropped for having no pairs.
    pub excluded: Vec<f64>,
}

/// Matheron estimator `(dof-2)/(dof |N(h)|) sum |Z_j - Z_k|^2`, row by row.
pub fn matheron_variogram(z: &DMatrix<f64>, bins: &LagBins, dof: f64) -> Result<VariogramCloud> {
    if !(dof > 2.0) {
        return Err(SqrError::InvalidInput(format!("degrees of freedom must exceed 2, got {dof}")));
    }
    let n = z.nrows();
    let m = z.ncols();
    let scale = (dof - 2.0) / dof;
    let mut lags = Vec::new();
    let mut weights = Vec::new();
    let mut excluded = Vec::new();
    let mut columns = Vec::new();
    for (center, pairs) in bins.centers.iter().zip(&bins.pairs) {
        if pairs.iter().any(|&(j, k)| j >= m || k >= m) {
            return Err(SqrError::InvalidInput("lag bin refers to a missing location".into()));
        }
        if pairs.is_empty() {
            excluded.push(*center);
            continue;
        }
        let count = pairs.len() as f64;
        let col: Vec<f64> = (0..n)
            .map(|i| {
                let ss: f64 = pairs.iter().map(|&(j, k)| (z[(i, j)] - z[(i, k)]).powi(2)).sum();
                scale * ss / count
            })
            .collect();
        lags.push(*center);
        weights.push(count);
        columns.push(col);
    }
    if !excluded.is_empty() {
        log::info!("{} empty lag bins excluded from the variogram", excluded.len());
    }
    let values = DMatrix::from_fn(n, lags.len(), |i, k| columns[k][i]);
    Ok(VariogramCloud { lags, weights, values, dof, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Diagonal weights `|N(h)| / (2 gamma(h; theta))^2`.
    #[default]
    CressieWls,
    /// Full inverse dispersion matrix of the estimator under a Gaussian
    /// field, evaluated once at a pilot fit.
    Genton,
}

/// Fitted Student-t copula with Matérn correlation of range `exp(alpha'x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaFit {
    pub dof: f64,
    pub nu: f64,
    pub alpha: Vec<f64>,
    pub weighting: Weighting,
    pub objective: f64,
    /// False when the simplex search stopped on its iteration limit.
    pub converged: bool,
}

impl CopulaFit {
    pub fn scale(&self, x: &[f64]) -> f64 {
        self.alpha.iter().zip(x).map(|(a, v)| a * v).sum::<f64>().exp()
    }
}

const MAX_SIMPLEX_ITERS: u64 = 4000;
const MIN_GAMMA: f64 = 1e-8;

struct Objective<'a> {
    cloud: &'a VariogramCloud,
    x: &'a DMatrix<f64>,
    nu: f64,
    /// Shared weight matrix for the Genton mode.
    dispersion: Option<DMatrix<f64>>,
    normalizer: f64,
}

impl Objective<'_> {
    fn raw(&self, alpha: &[f64]) -> f64 {
        let cloud = self.cloud;
        let kk = cloud.lags.len();
        let mut total = 0.0;
        let mut g = vec![0.0; kk];
        for i in 0..self.x.nrows() {
            let eta: f64 = (0..alpha.len()).map(|k| alpha[k] * self.x[(i, k)]).sum();
            let a = eta.exp();
            if !a.is_finite() {
                return f64::INFINITY;
            }
            for k in 0..kk {
                let model = 2.0 * (1.0 - matern(cloud.lags[k], a, self.nu));
                g[k] = cloud.values[(i, k)] - model;
                if self.dispersion.is_none() {
                    let denom = model.max(MIN_GAMMA);
                    total += cloud.weights[k] * g[k] * g[k] / (denom * denom);
                }
            }
            if let Some(v) = &self.dispersion {
                for k in 0..kk {
                    for l in 0..kk {
                        total += g[k] * v[(k, l)] * g[l];
                    }
                }
            }
        }
        total
    }
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, alpha: &Self::Param) -> std::result::Result<f64, ArgminError> {
        Ok(self.raw(alpha) / self.normalizer)
    }
}

fn simplex(start: &[f64], step: f64) -> Vec<Vec<f64>> {
    let mut pts = vec![start.to_vec()];
    for k in 0..start.len() {
        let mut p = start.to_vec();
        p[k] += step;
        pts.push(p);
    }
    pts
}

fn run_simplex(obj: &Objective<'_>, start: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
    let solver = NelderMead::new(simplex(start, 0.5))
        .with_sd_tolerance(1e-12)
        .map_err(|e| SqrError::Numerical(e.to_string()))?;
    let problem = Objective { dispersion: obj.dispersion.clone(), ..*obj };
    let res = Executor::new(problem, solver)
        .configure(|s| s.max_iters(MAX_SIMPLEX_ITERS))
        .run()
        .map_err(|e| SqrError::Numerical(e.to_string()))?;
    let state = res.state();
    let best = state.get_best_param().cloned().unwrap_or_else(|| start.to_vec());
    let converged = matches!(state.get_termination_status(), TerminationStatus::Terminated(TerminationReason::SolverConverged));
    Ok((best.clone(), obj.raw(&best), converged))
}

/// Per-subject log range by a grid search, regressed on the covariates.
fn log_moment_start(cloud: &VariogramCloud, x: &DMatrix<f64>, nu: f64) -> Vec<f64> {
    let n = x.nrows();
    let p = x.ncols();
    let grid: Vec<f64> = (0..=100).map(|k| -4.0 + 0.1 * k as f64).collect();
    let targets = nalgebra::DVector::from_fn(n, |i, _| {
        let mut best = (f64::INFINITY, 0.0);
        for &la in &grid {
            let a = la.exp();
            let err: f64 = (0..cloud.lags.len())
                .map(|k| {
                    let model = 2.0 * (1.0 - matern(cloud.lags[k], a, nu));
                    let denom = model.max(MIN_GAMMA);
                    cloud.weights[k] * (cloud.values[(i, k)] - model).powi(2) / (denom * denom)
                })
                .sum();
            if err < best.0 {
                best = (err, la);
            }
        }
        best.1
    });
    let sol = x.clone().svd(true, true).solve(&targets, 1e-12);
    match sol {
        Ok(v) if v.iter().all(|a| a.is_finite()) => v.iter().copied().collect(),
        _ => vec![0.0; p],
    }
}

/// Covariance of the Matheron estimates across lags for a unit-variance
/// Gaussian field with Matérn correlation at range `a`.
fn gaussian_dispersion(bins: &[Vec<(usize, usize)>], dist: &dyn Fn(usize, usize) -> f64, a: f64, nu: f64) -> DMatrix<f64> {
    const MAX_PAIRS: usize = 200;
    let thin: Vec<Vec<(usize, usize)>> = bins
        .iter()
        .map(|b| {
            let stride = b.len().div_ceil(MAX_PAIRS).max(1);
            b.iter().step_by(stride).copied().collect()
        })
        .collect();
    let corr = |j: usize, k: usize| if j == k { 1.0 } else { matern(dist(j, k), a, nu) };
    let kk = thin.len();
    let mut omega = DMatrix::zeros(kk, kk);
    for k in 0..kk {
        for l in k..kk {
            let mut acc = 0.0;
            for &(i1, j1) in &thin[k] {
                for &(i2, j2) in &thin[l] {
                    let c = corr(i1, i2) - corr(i1, j2) - corr(j1, i2) + corr(j1, j2);
                    acc += 2.0 * c * c;
                }
            }
            let v = acc / (thin[k].len() * thin[l].len()) as f64;
            omega[(k, l)] = v;
            omega[(l, k)] = v;
        }
    }
    omega
}

fn pseudo_inverse(omega: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(omega.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(*v));
    let cut = 1e-10 * top;
    let mut out = DMatrix::zeros(omega.nrows(), omega.ncols());
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > cut {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / ev;
        }
    }
    out
}

/// Weighted least-squares fit of `alpha` to the per-subject variograms.
///
/// `bins` and `grid` are only consulted by [`Weighting::Genton`], which needs
/// the pair structure behind every lag.
pub fn fit_copula(
    cloud: &VariogramCloud,
    x: &DMatrix<f64>,
    nu: f64,
    weighting: Weighting,
    bins: Option<(&LagBins, &Grid)>,
) -> Result<CopulaFit> {
    let (n, p) = x.shape();
    if cloud.values.nrows() != n {
        return Err(SqrError::InvalidInput(format!(
            "variogram has {} subjects but X has {n} rows",
            cloud.values.nrows()
        )));
    }
    if n == 0 || cloud.lags.len() < p {
        return Err(SqrError::InvalidInput(format!(
            "need at least {p} informative lags, got {}",
            cloud.lags.len()
        )));
    }
    if !(nu > 0.0) {
        return Err(SqrError::InvalidInput("Matérn smoothness must be positive".into()));
    }
    let normalizer = n as f64 * cloud.weights.iter().sum::<f64>();
    let cressie = Objective { cloud, x, nu, dispersion: None, normalizer };
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for start in [vec![0.0; p], log_moment_start(cloud, x, nu)] {
        let run = run_simplex(&cressie, &start)?;
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    let (mut alpha, mut objective, mut converged) = best.expect("two starts");
    // a restart from the best vertex guards against simplex collapse
    let again = run_simplex(&cressie, &alpha)?;
    if again.1 <= objective {
        (alpha, objective, converged) = again;
    }
    if weighting == Weighting::Genton {
        let (bins, grid) = bins.ok_or_else(|| SqrError::InvalidInput("Genton weighting needs the lag bins".into()))?;
        let kept: Vec<Vec<(usize, usize)>> = bins
            .centers
            .iter()
            .zip(&bins.pairs)
            .filter(|(c, pairs)| !pairs.is_empty() && cloud.lags.iter().any(|l| l == *c))
            .map(|(_, pairs)| pairs.clone())
            .collect();
        if kept.len() != cloud.lags.len() {
            return Err(SqrError::InvalidInput("lag bins do not match the variogram".into()));
        }
        let xbar: Vec<f64> = (0..p).map(|k| x.column(k).mean()).collect();
        let a = alpha.iter().zip(&xbar).map(|(u, v)| u * v).sum::<f64>().exp();
        let omega = gaussian_dispersion(&kept, &|j, k| grid.distance(j, k), a, nu);
        let v = pseudo_inverse(&omega);
        let scale = v.diagonal().iter().fold(0.0f64, |s, d| s.max(*d)).max(f64::MIN_POSITIVE);
        let genton = Objective { cloud, x, nu, dispersion: Some(v), normalizer: n as f64 * scale };
        (alpha, objective, converged) = run_simplex(&genton, &alpha)?;
    }
    if !converged {
        log::warn!("copula fit stopped on the iteration limit; returning the best point");
    }
    Ok(CopulaFit { dof: cloud.dof, nu, alpha, weighting, objective, converged })
}

/// `m x m` Matérn correlation at covariate vector `x`.
pub fn correlation_matrix(x: &[f64], fit: &CopulaFit, grid: &Grid) -> DMatrix<f64> {
    let a = fit.scale(x);
    let m = grid.len();
    DMatrix::from_fn(m, m, |j, k| if j == k { 1.0 } else { matern(grid.distance(j, k), a, fit.nu) })
}

/// Result of [`estimate_dof`].
#[derive(Debug, Clone, PartialEq)]
pub struct DofEstimate {
    pub dof: f64,
    /// `(dof, summed log-density)` over the candidate grid.
    pub profile: Vec<(f64, f64)>,
    pub pairs: usize,
}

/// Candidate degrees of freedom `3, 4, ..., 30`.
pub fn dof_grid() -> Vec<f64> {
    (3..=30).map(f64::from).collect()
}

/// Kendall's tau-b.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 && db == 0.0 {
                continue;
            } else if da == 0.0 {
                ties_a += 1;
            } else if db == 0.0 {
                ties_b += 1;
            } else if (da > 0.0) == (db > 0.0) {
                conc += 1;
            } else {
                disc += 1;
            }
        }
    }
    let n1 = (conc + disc + ties_a) as f64;
    let n2 = (conc + disc + ties_b) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return 0.0;
    }
    (conc - disc) as f64 / (n1 * n2).sqrt()
}

/// Profile pseudo-likelihood choice of the t-copula degrees of freedom.
///
/// Up to `pair_budget` location pairs are drawn with `seed`; each pair's
/// correlation comes from Kendall's tau, and the summed bivariate t-copula
/// log-density is maximized over [`dof_grid`] with ties going to the larger
/// value.
pub fn estimate_dof(u: &DMatrix<f64>, pair_budget: usize, seed: u64) -> Result<DofEstimate> {
    let (n, m) = u.shape();
    let lo = u.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    let hi = u.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
    if u.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
        return Err(SqrError::InvalidInput("pseudo-observations must lie in (0, 1)".into()));
    }
    if lo == hi {
        return Err(SqrError::InvalidInput("pseudo-observations are degenerate".into()));
    }
    let total = m * m.saturating_sub(1) / 2;
    let take = pair_budget.min(total);
    if take * n < 100 {
        return Err(SqrError::InvalidInput(format!(
            "need at least 100 usable bivariate observations, got {}",
            take * n
        )));
    }
    let mut all: Vec<(usize, usize)> = Vec::with_capacity(total);
    for j in 0..m {
        for k in j + 1..m {
            all.push((j, k));
        }
    }
    let pairs: Vec<(usize, usize)> = if take == total {
        all
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, total, take).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i]).collect()
    };
    let cols: Vec<Vec<f64>> = (0..m).map(|j| u.column(j).iter().copied().collect()).collect();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(j, k)| (0.5 * std::f64::consts::PI * kendall_tau(&cols[j], &cols[k])).sin().clamp(-0.999, 0.999))
        .collect();
    let mut profile = Vec::new();
    for dof in dof_grid() {
        let z = t_scores(u, dof);
        let dist = StudentT::new(dof);
        let mut ll = 0.0;
        for (&(j, k), &r) in pairs.iter().zip(&rho) {
            for i in 0..n {
                ll += t_copula_ln_density_z(&dist, z[(i, j)], z[(i, k)], r);
            }
        }
        profile.push((dof, ll));
    }
    let mut best = profile[0];
    for &(dof, ll) in &profile[1..] {
        if ll >= best.1 {
            best = (dof, ll);
        }
    }
    Ok(DofEstimate { dof: best.0, profile, pairs: pairs.len() })
}
