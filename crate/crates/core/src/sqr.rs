//! Penalized check-loss fitting of function-on-scalar quantile regressions.
//!
//! For quantile level `tau` the coefficient functions are
//! `beta_k(s) = mu_k + b_k' k_s` and minimize
//!
//! ```text
//!     sum_o rho_tau(y_o - x_i' beta(s_o)) + (lambda/2) sum_k b_k' Sigma b_k
//! ```
//!
//! [`fit_quantile`] alternates between the box-constrained dual for fixed
//! `mu` (see [`crate::qp`]) and an update of `mu`, which is the multiplier of
//! the dual's linear constraint `sum_o d_o x_i = 0`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, SqrError};
use crate::kernels::{kvec, Grid, KernelSpec};
use crate::qp::{
    classify, dual_products, interior_point, refine_active_set, solve_box_qp, Bound, DualProblem, KernelFactor, Layout,
    QpMethod, QpOptions, DEFAULT_EIG_CUTOFF,
};

/// Check function `rho_tau(r)`.
pub fn check_loss(r: f64, tau: f64) -> f64 {
    if r > 0.0 {
        tau * r
    } else {
        -(1.0 - tau) * r
    }
}

/// Covariates, responses and the observation locations.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: Vec<f64>,
    layout: Layout,
    grid: Grid,
    fixed: bool,
}

impl Dataset {
    /// Fixed design: `y` is `n x m`, subject `i` observed at every grid point.
    pub fn fixed(x: DMatrix<f64>, y: &DMatrix<f64>, grid: Grid) -> Result<Self> {
        let (n, m) = y.shape();
        if x.nrows() != n {
            return Err(SqrError::InvalidInput(format!(
                "X has {} rows but Y has {n}",
                x.nrows()
            )));
        }
        if grid.len() != m {
            return Err(SqrError::InvalidInput(format!(
                "grid has {} points but Y has {m} columns",
                grid.len()
            )));
        }
        for i in 0..n {
            for j in 0..m {
                if !y[(i, j)].is_finite() {
                    return Err(SqrError::InvalidInput(format!(
                        "Y has a non-finite value at row {}, column {}",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        let yv = (0..n * m).map(|o| y[(o / m, o % m)]).collect();
        let ds = Dataset { x, y: yv, layout: Layout::fixed(n, m), grid, fixed: true };
        ds.validate_x()?;
        Ok(ds)
    }

    /// Random design from `(subject, location index, value)` records; `grid`
    /// holds the distinct locations.
    pub fn random(x: DMatrix<f64>, grid: Grid, records: &[(usize, usize, f64)]) -> Result<Self> {
        let n = x.nrows();
        for (r, &(i, l, v)) in records.iter().enumerate() {
            if i >= n || l >= grid.len() {
                return Err(SqrError::InvalidInput(format!("record {} refers to a missing subject or location", r + 1)));
            }
            if !v.is_finite() {
                return Err(SqrError::InvalidInput(format!("record {} has a non-finite response", r + 1)));
            }
        }
        let subject = records.iter().map(|r| r.0).collect();
        let location = records.iter().map(|r| r.1).collect();
        let y = records.iter().map(|r| r.2).collect();
        let layout = Layout::new(n, grid.len(), subject, location);
        let ds = Dataset { x, y, layout, grid, fixed: false };
        ds.validate_x()?;
        Ok(ds)
    }

    fn validate_x(&self) -> Result<()> {
        let (n, p) = self.x.shape();
        for i in 0..n {
            for k in 0..p {
                if !self.x[(i, k)].is_finite() {
                    return Err(SqrError::InvalidInput(format!(
                        "X has a non-finite value at row {}, column {}",
                        i + 1,
                        k + 1
                    )));
                }
            }
        }
        if p == 0 || n < p {
            return Err(SqrError::InvalidInput(format!("need n >= p >= 1, got n = {n}, p = {p}")));
        }
        let sv = self.x.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        if !(smin > 1e-10 * smax) {
            return Err(SqrError::InvalidInput("X does not have full column rank".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of distinct locations.
    pub fn m(&self) -> usize {
        self.grid.len()
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn is_fixed(&self) -> bool {
        self.fixed
    }

    /// `n x m` response matrix for a fixed design.
    pub fn response_matrix(&self) -> Option<DMatrix<f64>> {
        self.fixed.then(|| {
            let m = self.m();
            DMatrix::from_fn(self.n(), m, |i, j| self.y[i * m + j])
        })
    }

    /// Same design with a replaced response vector.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.y.len() || y.iter().any(|v| !v.is_finite()) {
            return Err(SqrError::InvalidInput("replacement response has wrong length or non-finite values".into()));
        }
        Ok(Dataset { y, ..self.clone() })
    }

    /// `y_o - x_i' mu` for every observation.
    fn residuals(&self, mu: &[f64], out: &mut [f64]) {
        let p = self.p();
        for o in 0..self.y.len() {
            let i = self.layout.subject(o);
            out[o] = self.y[o] - (0..p).map(|k| self.x[(i, k)] * mu[k]).sum::<f64>();
        }
    }

    fn response_sd(&self) -> f64 {
        let n = self.y.len() as f64;
        let mean = self.y.iter().sum::<f64>() / n;
        let var = self.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        var.sqrt()
    }
}

/// Starting point for `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MuInit {
    /// Linear quantile regression on the stacked data (kernel part switched off).
    PooledLinear,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Stop when every `|Delta mu_k| <= tol_mu * (1 + |mu|_inf)`.
    pub tol_mu: f64,
    pub max_outer: usize,
    pub qp: QpOptions,
    /// Initial constant-kernel shift, as a multiple of the mean Gram diagonal.
    pub augmentation: f64,
    /// `d` is interior when it is this fraction of `(hi - lo)` inside the box.
    pub interior_margin: f64,
    /// Interpolation tolerance as a fraction of `sd(Y)`.
    pub interp_tol: f64,
    pub init: MuInit,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol_mu: 1e-7,
            max_outer: 30,
            qp: QpOptions::default(),
            augmentation: 1e3,
            interior_margin: 1e-6,
            interp_tol: 1e-6,
            init: MuInit::PooledLinear,
        }
    }
}

/// A fitted quantile regression at one `(tau, lambda)`.
#[derive(Debug, Clone)]
pub struct QuantileFit {
    pub tau: f64,
    pub lambda: f64,
    pub mu: DVector<f64>,
    /// `p x m` representer coefficients; row `k` is `b_k`.
    pub b: DMatrix<f64>,
    /// One dual variable per observation.
    pub dual: Vec<f64>,
    /// Fitted values per observation.
    pub fitted: Vec<f64>,
    /// Observations whose dual variable is strictly inside the box.
    pub interior: Vec<usize>,
    pub kernel: KernelSpec,
    pub locations: Grid,
    /// `beta_k(s_l)` at the observation locations, `p x m`.
    pub beta_grid: DMatrix<f64>,
    pub objective: f64,
    /// Primal objective after every outer iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `|sum_o d_o x_i|_inf` at the returned point.
    pub stationarity: f64,
    pub interp_tol: f64,
    n_subjects: usize,
}

impl QuantileFit {
    pub fn p(&self) -> usize {
        self.mu.len()
    }

    /// Dual variables as an `n x m` matrix (fixed design).
    pub fn dual_matrix(&self) -> DMatrix<f64> {
        let m = self.locations.len();
        DMatrix::from_fn(self.n_subjects, m, |i, j| self.dual[i * m + j])
    }

    /// `|Se|`.
    pub fn se_size(&self) -> usize {
        self.interior.len()
    }
}

fn primal_objective(data: &Dataset, tau: f64, fitted: &[f64], penalty: f64) -> f64 {
    data.y.iter().zip(fitted).map(|(y, f)| check_loss(y - f, tau)).sum::<f64>() + penalty
}

fn validate_tau_lambda(tau: f64, lambda: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(SqrError::InvalidInput(format!("tau must lie in (0, 1), got {tau}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SqrError::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

struct AlmOutcome {
    mu: Vec<f64>,
    dual: Vec<f64>,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

/// Method-of-multipliers loop on the dual: box QP in `d` for fixed `mu`, then
/// `mu <- mu + (kappa/lambda) sum_o d_o x_i`, which is exactly the `mu` that
/// makes the interior observations interpolate.
#[allow(clippy::too_many_arguments)]
fn multiplier_loop(
    data: &Dataset,
    gram: Option<&DMatrix<f64>>,
    tau: f64,
    lambda: f64,
    kappa0: f64,
    opts: &FitOptions,
    qp_tol: f64,
    mut mu: Vec<f64>,
    mut dual: Vec<f64>,
) -> AlmOutcome {
    let p = data.p();
    let n_obs = data.n_obs();
    let xmax = data.x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let stat_tol = 1e-5 * data.n() as f64 * xmax;
    let layout = &data.layout;
    let mut kappa = kappa0;
    let mut prev_s = f64::INFINITY;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut linear = vec![0.0; n_obs];
    let qp_opts = QpOptions { tol: Some(qp_tol), ..opts.qp };
    for it in 1..=opts.max_outer {
        iterations = it;
        for o in 0..n_obs {
            let i = layout.subject(o);
            let xm: f64 = (0..p).map(|k| data.x[(i, k)] * mu[k]).sum();
            linear[o] = data.y[o] - xm;
        }
        let prob = DualProblem {
            gram,
            x: &data.x,
            layout,
            linear: &linear,
            tau,
            lambda,
            constant_shift: kappa,
        };
        let sol = solve_box_qp(prob, &qp_opts, Some(&dual));
        dual.clone_from(&sol.dual);
        let scale = kappa / lambda;
        let mut step_max: f64 = 0.0;
        for k in 0..p {
            let step = scale * sol.stationarity[k];
            mu[k] += step;
            step_max = step_max.max(step.abs());
        }
        let s_norm = sol.stationarity.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // primal objective at the interpolating mu
        let mut fitted = vec![0.0; n_obs];
        for o in 0..n_obs {
            let i = layout.subject(o);
            let l = layout.location(o);
            fitted[o] = (0..p)
                .map(|k| data.x[(i, k)] * (mu[k] + sol.smoothed[l * p + k] / lambda))
                .sum();
        }
        let penalty: f64 = sol.weighted.iter().zip(&sol.smoothed).map(|(a, b)| a * b).sum::<f64>() / (2.0 * lambda);
        trace.push(primal_objective(data, tau, &fitted, penalty));
        let mu_scale = 1.0 + mu.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if sol.certificate.converged && s_norm <= stat_tol && step_max <= opts.tol_mu * mu_scale {
            converged = true;
            break;
        }
        if s_norm > 0.25 * prev_s {
            kappa *= 4.0;
        }
        prev_s = s_norm;
    }
    AlmOutcome {
        mu,
        dual,
        trace,
        converged,
        iterations,
    }
}

/// Warm-start information carried between neighbouring fits.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub tau: f64,
    pub mu: Vec<f64>,
    pub dual: Vec<f64>,
}

impl From<&QuantileFit> for WarmStart {
    fn from(f: &QuantileFit) -> Self {
        WarmStart { tau: f.tau, mu: f.mu.iter().copied().collect(), dual: f.dual.clone() }
    }
}

/// Fits the penalized quantile regression at `(tau, lambda)` by the
/// primal-dual alternation.
pub fn fit_quantile(
    data: &Dataset,
    tau: f64,
    lambda: f64,
    kernel: &KernelSpec,
    opts: &FitOptions,
) -> Result<QuantileFit> {
    fit_quantile_warm(data, tau, lambda, kernel, opts, None)
}

pub fn fit_quantile_warm(
    data: &Dataset,
    tau: f64,
    lambda: f64,
    kernel: &KernelSpec,
    opts: &FitOptions,
    warm: Option<&WarmStart>,
) -> Result<QuantileFit> {
    validate_tau_lambda(tau, lambda)?;
    let prep = Prepared::new(kernel, &data.grid)?;
    fit_prepared(data, tau, lambda, kernel, &prep, opts, warm)
}

/// Jitter-free Gram and its low-rank factor, shared by fits on one grid.
struct Prepared {
    gram: DMatrix<f64>,
    factor: KernelFactor,
}

impl Prepared {
    fn new(kernel: &KernelSpec, grid: &Grid) -> Result<Self> {
        let gram = kernel.gram_free(grid)?;
        let factor = KernelFactor::new(Some(&gram), DEFAULT_EIG_CUTOFF);
        Ok(Prepared { gram, factor })
    }
}

fn fit_prepared(
    data: &Dataset,
    tau: f64,
    lambda: f64,
    kernel: &KernelSpec,
    prep: &Prepared,
    opts: &FitOptions,
    warm: Option<&WarmStart>,
) -> Result<QuantileFit> {
    let p = data.p();
    let n_obs = data.n_obs();
    let sd = data.response_sd();
    let interp_tol = opts.interp_tol * if sd > 0.0 { sd } else { 1.0 };
    let gram = &prep.gram;
    let mean_diag = (gram.diagonal().sum() / gram.nrows() as f64).max(f64::MIN_POSITIVE);
    let kappa0 = opts.augmentation * mean_diag;
    let ymax = data.y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let qp_tol = (1e-7 * (1.0 + ymax)).min(0.1 * interp_tol);
    let (lo, hi) = (-(1.0 - tau), tau);
    let ctx = FitContext { data, tau, lambda, kernel, gram, interp_tol, margin: opts.interior_margin };
    let mut trace = Vec::new();

    if let Some(w) = warm.filter(|w| w.mu.len() == p && w.dual.len() == n_obs) {
        // bound pattern from the box the warm dual was solved in
        let class = classify(&w.dual, -(1.0 - w.tau), w.tau);
        let d: Vec<f64> = w
            .dual
            .iter()
            .zip(&class)
            .map(|(v, c)| match c {
                Bound::Lower => lo,
                Bound::Upper => hi,
                Bound::Free => v.clamp(lo, hi),
            })
            .collect();
        if let Some((mu, dual)) = ctx.finish_on_face(&w.mu, &d, &class, qp_tol, opts.qp.max_active_set_iter) {
            trace.push(ctx.primal(&mu, &dual));
            return Ok(ctx.build(mu, dual, trace, true, 0));
        }
    }

    let mut mu = match warm {
        Some(w) if w.mu.len() == p => w.mu.clone(),
        _ => match opts.init {
            MuInit::Zero => vec![0.0; p],
            MuInit::PooledLinear => pooled_linear(data, tau, lambda, kappa0, &opts.qp),
        },
    };

    let kappa = kappa0;
    let mut linear = vec![0.0; n_obs];
    for it in 1..=opts.max_outer {
        data.residuals(&mu, &mut linear);
        let prob = DualProblem {
            gram: Some(gram),
            x: &data.x,
            layout: &data.layout,
            linear: &linear,
            tau,
            lambda,
            constant_shift: kappa,
        };
        let ipm = interior_point(&prob, &prep.factor, opts.qp.max_ipm_iter);
        let (_, _, s) = dual_products(None, &data.x, &data.layout, &ipm.dual);
        for k in 0..p {
            mu[k] += kappa / lambda * s[k];
        }
        trace.push(ctx.primal(&mu, &ipm.dual));
        if let Some((mu, dual)) = ctx.finish_on_face(&mu, &ipm.dual, &ipm.class, qp_tol, opts.qp.max_active_set_iter) {
            trace.push(ctx.primal(&mu, &dual));
            return Ok(ctx.build(mu, dual, trace, true, it));
        }
        log::debug!("active-set finish failed at outer iteration {it}");
    }

    // coordinate-ascent multiplier loop as the last resort
    let ca = FitOptions { qp: QpOptions { method: QpMethod::CoordinateAscent, ..opts.qp }, ..opts.clone() };
    let out = multiplier_loop(data, Some(gram), tau, lambda, kappa0, &ca, qp_tol, mu, vec![0.0; n_obs]);
    trace.extend(&out.trace);
    if !out.converged {
        log::warn!("primal-dual fit at tau = {tau}, lambda = {lambda} stopped after {} iterations", out.iterations);
    }
    Ok(ctx.build(out.mu, out.dual, trace, out.converged, opts.max_outer + out.iterations))
}

/// Linear quantile regression of the stacked data (zero kernel), used to
/// start `mu`.
fn pooled_linear(data: &Dataset, tau: f64, lambda: f64, kappa: f64, qp: &QpOptions) -> Vec<f64> {
    let p = data.p();
    let mut mu = vec![0.0; p];
    let mut linear = vec![0.0; data.n_obs()];
    data.residuals(&mu, &mut linear);
    let prob = DualProblem {
        gram: None,
        x: &data.x,
        layout: &data.layout,
        linear: &linear,
        tau,
        lambda,
        constant_shift: kappa,
    };
    let none = KernelFactor::new(None, DEFAULT_EIG_CUTOFF);
    let ipm = interior_point(&prob, &none, qp.max_ipm_iter);
    let (_, _, s) = dual_products(None, &data.x, &data.layout, &ipm.dual);
    for k in 0..p {
        mu[k] += kappa / lambda * s[k];
    }
    mu
}

/// Everything needed to turn `(mu, d)` into a [`QuantileFit`].
struct FitContext<'a> {
    data: &'a Dataset,
    tau: f64,
    lambda: f64,
    kernel: &'a KernelSpec,
    gram: &'a DMatrix<f64>,
    interp_tol: f64,
    margin: f64,
}

impl FitContext<'_> {
    /// Exact optimum on the face `class`, found by the active-set solver with
    /// `mu` as an unknown.
    fn finish_on_face(&self, mu: &[f64], d: &[f64], class: &[Bound], tol: f64, max_iter: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let data = self.data;
        let mut linear = vec![0.0; data.n_obs()];
        data.residuals(mu, &mut linear);
        let prob = DualProblem {
            gram: Some(self.gram),
            x: &data.x,
            layout: &data.layout,
            linear: &linear,
            tau: self.tau,
            lambda: self.lambda,
            constant_shift: 0.0,
        };
        let r = refine_active_set(&prob, d, class, true, tol, max_iter)?;
        let mu_new = mu.iter().zip(&r.shift).map(|(a, b)| a + b).collect();
        Some((mu_new, r.dual))
    }

    fn fitted(&self, mu: &[f64], smoothed: &[f64]) -> Vec<f64> {
        let data = self.data;
        let p = data.p();
        (0..data.n_obs())
            .map(|o| {
                let i = data.layout.subject(o);
                let l = data.layout.location(o);
                (0..p).map(|k| data.x[(i, k)] * (mu[k] + smoothed[l * p + k] / self.lambda)).sum()
            })
            .collect()
    }

    fn primal(&self, mu: &[f64], d: &[f64]) -> f64 {
        let (a, pm, _) = dual_products(Some(self.gram), &self.data.x, &self.data.layout, d);
        let fitted = self.fitted(mu, &pm);
        let penalty: f64 = a.iter().zip(&pm).map(|(u, v)| u * v).sum::<f64>() / (2.0 * self.lambda);
        primal_objective(self.data, self.tau, &fitted, penalty)
    }

    fn build(&self, mu: Vec<f64>, dual: Vec<f64>, trace: Vec<f64>, converged: bool, iterations: usize) -> QuantileFit {
        let data = self.data;
        let (p, m, lambda, tau) = (data.p(), data.m(), self.lambda, self.tau);
        let (a, pm, s) = dual_products(Some(self.gram), &data.x, &data.layout, &dual);
        let fitted = self.fitted(&mu, &pm);
        let penalty: f64 = a.iter().zip(&pm).map(|(u, v)| u * v).sum::<f64>() / (2.0 * lambda);
        let objective = primal_objective(data, tau, &fitted, penalty);
        let mu = DVector::from_vec(mu);
        let b = DMatrix::from_fn(p, m, |k, l| a[l * p + k] / lambda);
        let beta_grid = DMatrix::from_fn(p, m, |k, l| mu[k] + pm[l * p + k] / lambda);
        let (lo, hi) = (-(1.0 - tau) + self.margin, tau - self.margin);
        let interior = (0..data.n_obs()).filter(|&o| dual[o] > lo && dual[o] < hi).collect();
        let stationarity = s.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        QuantileFit {
            tau,
            lambda,
            mu,
            b,
            dual,
            fitted,
            interior,
            kernel: self.kernel.clone(),
            locations: data.grid.clone(),
            beta_grid,
            objective,
            trace,
            converged,
            iterations,
            stationarity,
            interp_tol: self.interp_tol,
            n_subjects: data.n(),
        }
    }
}

/// `sum_k x_k (mu_k + b_k' k_s)`.
pub fn predict(fit: &QuantileFit, x: &[f64], s: &[f64]) -> f64 {
    let k_s = kvec(&fit.kernel, &fit.locations, s);
    let coef = &fit.b * k_s;
    (0..fit.p()).map(|k| x[k] * (fit.mu[k] + coef[k])).sum()
}

/// Prediction at the `l`-th fitted location, without re-evaluating the kernel.
pub fn predict_at_location(fit: &QuantileFit, x: &[f64], l: usize) -> f64 {
    (0..fit.p()).map(|k| x[k] * fit.beta_grid[(k, l)]).sum()
}

/// `p x |locations|` matrix of `beta_k(s)`.
pub fn coefficients(fit: &QuantileFit, locations: &Grid) -> DMatrix<f64> {
    let p = fit.p();
    let mut out = DMatrix::zeros(p, locations.len());
    for (c, s) in locations.points().enumerate() {
        let k_s = kvec(&fit.kernel, &fit.locations, s);
        let coef = &fit.b * k_s;
        for k in 0..p {
            out[(k, c)] = fit.mu[k] + coef[k];
        }
    }
    out
}

/// Divergence of the fitted values, `|Se|`.
pub fn divergence(fit: &QuantileFit) -> usize {
    fit.se_size()
}

/// `sum rho_tau(Y - Yhat) / (nm - df)`.
pub fn gacv(fit: &QuantileFit, data: &Dataset) -> Result<f64> {
    let df = divergence(fit);
    let nm = data.n_obs();
    if df >= nm {
        return Err(SqrError::Degenerate { df, nm });
    }
    let loss: f64 = data.y.iter().zip(&fit.fitted).map(|(y, f)| check_loss(y - f, fit.tau)).sum();
    Ok(loss / (nm - df) as f64)
}

/// GACV curve from [`select_lambda`].
#[derive(Debug, Clone)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// `(lambda, GACV)` pairs in the order given; degenerate fits carry `None`.
    pub table: Vec<(f64, Option<f64>)>,
    pub fit: QuantileFit,
}

/// Refits over `lambdas` (largest first, warm-started) and returns the GACV
/// minimizer; ties go to the larger lambda.
pub fn select_lambda(
    data: &Dataset,
    tau: f64,
    kernel: &KernelSpec,
    lambdas: &[f64],
    opts: &FitOptions,
) -> Result<LambdaSelection> {
    if lambdas.is_empty() {
        return Err(SqrError::InvalidInput("empty lambda grid".into()));
    }
    let prep = Prepared::new(kernel, &data.grid)?;
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    let mut table = vec![(0.0, None); lambdas.len()];
    let mut best: Option<(f64, QuantileFit)> = None;
    let mut warm: Option<WarmStart> = None;
    for &idx in &order {
        let lambda = lambdas[idx];
        validate_tau_lambda(tau, lambda)?;
        let fit = fit_prepared(data, tau, lambda, kernel, &prep, opts, warm.as_ref())?;
        let score = gacv(&fit, data).ok();
        table[idx] = (lambda, score);
        warm = Some(WarmStart::from(&fit));
        if let Some(g) = score {
            // strict improvement needed: larger lambdas were visited first
            let better = best.as_ref().is_none_or(|(bg, _)| g < *bg);
            if better {
                best = Some((g, fit));
            }
        }
    }
    match best {
        Some((_, fit)) => Ok(LambdaSelection { lambda: fit.lambda, table, fit }),
        None => Err(SqrError::Degenerate { df: data.n_obs(), nm: data.n_obs() }),
    }
}

/// How the smoothing parameter is chosen along a tau grid.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaPolicy {
    Fixed(f64),
    /// One GACV selection at the grid tau closest to 0.5, reused for all tau.
    Shared(Vec<f64>),
    /// GACV selection separately at every tau.
    PerTau(Vec<f64>),
}

/// `tau = 0.01, 0.02, ..., 0.99`.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

/// One fit per quantile level, with monotone rearrangement across tau.
#[derive(Debug, Clone)]
pub struct QuantileSurface {
    pub taus: Vec<f64>,
    pub fits: Vec<QuantileFit>,
    pub monotonized: bool,
    /// Sorted predictions at every training observation, `n_obs x K` row-major.
    training: Vec<f64>,
}

impl QuantileSurface {
    pub fn from_fits(fits: Vec<QuantileFit>, data: &Dataset) -> Result<Self> {
        if fits.is_empty() {
            return Err(SqrError::InvalidInput("surface needs at least one fit".into()));
        }
        let taus: Vec<f64> = fits.iter().map(|f| f.tau).collect();
        if taus.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SqrError::InvalidInput("tau grid must be strictly increasing".into()));
        }
        let k = taus.len();
        let n_obs = data.n_obs();
        let mut training = vec![0.0; n_obs * k];
        for o in 0..n_obs {
            let row = &mut training[o * k..(o + 1) * k];
            for (t, f) in fits.iter().enumerate() {
                row[t] = f.fitted[o];
            }
            row.sort_by(f64::total_cmp);
        }
        Ok(QuantileSurface { taus, fits, monotonized: true, training })
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Rearranged quantile predictions at training observation `o`.
    pub fn training_quantiles(&self, o: usize) -> &[f64] {
        let k = self.taus.len();
        &self.training[o * k..(o + 1) * k]
    }

    /// Rearranged quantile predictions across the tau grid at `(x, s)`.
    pub fn quantiles(&self, x: &[f64], s: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = self.fits.iter().map(|f| predict(f, x, s)).collect();
        if self.monotonized {
            q.sort_by(f64::total_cmp);
        }
        q
    }

    /// Same as [`quantiles`](Self::quantiles) at the `l`-th fitted location.
    pub fn quantiles_at_location(&self, x: &[f64], l: usize) -> Vec<f64> {
        let mut q: Vec<f64> = self.fits.iter().map(|f| predict_at_location(f, x, l)).collect();
        if self.monotonized {
            q.sort_by(f64::total_cmp);
        }
        q
    }
}

/// Fits every tau in `taus` (warm-started from the previous level) and
/// rearranges the predictions to be nondecreasing in tau.
pub fn fit_surface(
    data: &Dataset,
    taus: &[f64],
    kernel: &KernelSpec,
    policy: &LambdaPolicy,
    opts: &FitOptions,
) -> Result<QuantileSurface> {
    if taus.is_empty() || taus.windows(2).any(|w| w[1] <= w[0]) || taus[0] <= 0.0 || taus[taus.len() - 1] >= 1.0 {
        return Err(SqrError::InvalidInput("tau grid must be strictly increasing inside (0, 1)".into()));
    }
    let prep = Prepared::new(kernel, &data.grid)?;
    let shared = match policy {
        LambdaPolicy::Fixed(l) => Some(*l),
        LambdaPolicy::Shared(grid) => {
            let center = taus
                .iter()
                .copied()
                .min_by(|a, b| (a - 0.5).abs().total_cmp(&(b - 0.5).abs()))
                .expect("nonempty");
            Some(select_lambda(data, center, kernel, grid, opts)?.lambda)
        }
        LambdaPolicy::PerTau(_) => None,
    };
    // start from the median and move outwards so warm starts stay close
    let k = taus.len();
    let start = (0..k)
        .min_by(|&a, &b| (taus[a] - 0.5).abs().total_cmp(&(taus[b] - 0.5).abs()))
        .expect("nonempty");
    let mut fits: Vec<Option<QuantileFit>> = vec![None; k];
    let wrap = |index: usize, e: SqrError| SqrError::AtTau { index, tau: taus[index], source: Box::new(e) };
    let run = |t: usize, warm: Option<&WarmStart>| -> Result<QuantileFit> {
        match (policy, shared) {
            (_, Some(lambda)) => {
                validate_tau_lambda(taus[t], lambda).map_err(|e| wrap(t, e))?;
                fit_prepared(data, taus[t], lambda, kernel, &prep, opts, warm).map_err(|e| wrap(t, e))
            }
            (LambdaPolicy::PerTau(grid), None) => {
                select_lambda(data, taus[t], kernel, grid, opts).map(|s| s.fit).map_err(|e| wrap(t, e))
            }
            _ => unreachable!(),
        }
    };
    let first = run(start, None)?;
    let mid = WarmStart::from(&first);
    fits[start] = Some(first);
    let mut warm = mid.clone();
    for t in start + 1..k {
        let f = run(t, Some(&warm))?;
        warm = WarmStart::from(&f);
        fits[t] = Some(f);
    }
    warm = mid;
    for t in (0..start).rev() {
        let f = run(t, Some(&warm))?;
        warm = WarmStart::from(&f);
        fits[t] = Some(f);
    }
    QuantileSurface::from_fits(fits.into_iter().map(|f| f.expect("filled")).collect(), data)
}

/// Options for the ADMM baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmOptions {
    pub rho: f64,
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Residual balancing factor; 0 keeps `rho` fixed.
    pub balance: f64,
    /// Eigenvalues of the Gram below this fraction of the largest are dropped.
    pub eig_cutoff: f64,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        AdmmOptions { rho: 1.0, max_iter: 50_000, eps_abs: 1e-8, eps_rel: 1e-7, balance: 10.0, eig_cutoff: 1e-12 }
    }
}

/// Proximal map of `rho_tau / rho`: a shifted soft threshold.
pub fn check_loss_prox(v: f64, tau: f64, rho: f64) -> f64 {
    if v > tau / rho {
        v - tau / rho
    } else if v < -(1.0 - tau) / rho {
        v + (1.0 - tau) / rho
    } else {
        0.0
    }
}

/// Solves the same objective by ADMM on the split `r = y - Z(mu, B)`.
///
/// `Sigma = U Lambda U'` is factored once; writing `Sigma b_k = U Lambda^{1/2} g_k`
/// turns the penalty into `|g_k|^2`, so the `(mu, B)` step is a ridge solve
/// with a matrix that only changes when `rho` is rebalanced.
pub fn fit_quantile_admm(
    data: &Dataset,
    tau: f64,
    lambda: f64,
    kernel: &KernelSpec,
    opts: &AdmmOptions,
) -> Result<QuantileFit> {
    validate_tau_lambda(tau, lambda)?;
    let p = data.p();
    let m = data.m();
    let n_obs = data.n_obs();
    let layout = &data.layout;
    let gram = kernel.gram_free(&data.grid)?;
    let eig = SymmetricEigen::new(gram.clone());
    let emax = eig.eigenvalues.max().max(0.0);
    let keep: Vec<usize> = (0..m).filter(|&j| eig.eigenvalues[j] > opts.eig_cutoff * emax).collect();
    let r = keep.len();
    // W = Lambda^{1/2} U' restricted to kept eigenpairs (r x m)
    let w = DMatrix::from_fn(r, m, |a, l| eig.eigenvalues[keep[a]].sqrt() * eig.eigenvectors[(l, keep[a])]);
    let q = 1 + r;
    let dim = p * q;
    // per-location design blocks: h_l = [1; w_l], C_l = sum_{o at l} x_i x_i'
    let h: Vec<Vec<f64>> = (0..m)
        .map(|l| std::iter::once(1.0).chain((0..r).map(|a| w[(a, l)])).collect())
        .collect();
    let mut ztz = DMatrix::<f64>::zeros(dim, dim);
    for (l, obs) in layout.by_location().iter().enumerate() {
        let mut c = DMatrix::<f64>::zeros(p, p);
        for &o in obs {
            let xi = data.x.row(layout.subject(o));
            c += xi.transpose() * xi;
        }
        let hl = &h[l];
        // theta is stored column-major over (k, a): index a * p + k
        for a in 0..q {
            for b in 0..q {
                let hab = hl[a] * hl[b];
                if hab == 0.0 {
                    continue;
                }
                for k1 in 0..p {
                    for k2 in 0..p {
                        ztz[(a * p + k1, b * p + k2)] += hab * c[(k1, k2)];
                    }
                }
            }
        }
    }
    let factor = |rho: f64| -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let mut mat = &ztz * rho;
        for idx in p..dim {
            mat[(idx, idx)] += lambda;
        }
        mat.cholesky().ok_or_else(|| SqrError::Numerical("ADMM ridge system is singular".into()))
    };
    let mut rho = opts.rho;
    let mut chol = factor(rho)?;
    let y = &data.y;
    let mut theta = DVector::<f64>::zeros(dim);
    let mut resid = y.clone();
    let mut u = vec![0.0; n_obs];
    let mut zt = vec![0.0; n_obs];
    let predict_all = |theta: &DVector<f64>, out: &mut [f64]| {
        // F_l = Theta h_l (p-vector)
        let mut f = vec![0.0; m * p];
        for l in 0..m {
            for a in 0..q {
                let ha = h[l][a];
                if ha != 0.0 {
                    for k in 0..p {
                        f[l * p + k] += theta[a * p + k] * ha;
                    }
                }
            }
        }
        for o in 0..n_obs {
            let i = layout.subject(o);
            let l = layout.location(o);
            out[o] = (0..p).map(|k| data.x[(i, k)] * f[l * p + k]).sum();
        }
    };
    let zt_apply = |v: &[f64]| -> DVector<f64> {
        let mut out = DVector::<f64>::zeros(dim);
        for (l, obs) in layout.by_location().iter().enumerate() {
            let mut acc = vec![0.0; p];
            for &o in obs {
                let i = layout.subject(o);
                for k in 0..p {
                    acc[k] += data.x[(i, k)] * v[o];
                }
            }
            for a in 0..q {
                let ha = h[l][a];
                if ha != 0.0 {
                    for k in 0..p {
                        out[a * p + k] += ha * acc[k];
                    }
                }
            }
        }
        out
    };
    let mut converged = false;
    let mut iterations = 0;
    let mut rhs_vec = vec![0.0; n_obs];
    let sqrt_n = (n_obs as f64).sqrt();
    let sqrt_dim = (dim as f64).sqrt();
    let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    for it in 1..=opts.max_iter {
        iterations = it;
        for o in 0..n_obs {
            rhs_vec[o] = y[o] - resid[o] + u[o];
        }
        let rhs = zt_apply(&rhs_vec) * rho;
        theta = chol.solve(&rhs);
        predict_all(&theta, &mut zt);
        let mut pri2 = 0.0;
        let mut dr = vec![0.0; n_obs];
        let mut rnorm2 = 0.0;
        let mut ztnorm2 = 0.0;
        for o in 0..n_obs {
            let v = y[o] - zt[o] + u[o];
            let new_r = check_loss_prox(v, tau, rho);
            dr[o] = new_r - resid[o];
            resid[o] = new_r;
            let prim = y[o] - zt[o] - new_r;
            u[o] += prim;
            pri2 += prim * prim;
            rnorm2 += new_r * new_r;
            ztnorm2 += zt[o] * zt[o];
        }
        let pri = pri2.sqrt();
        let dual_res = rho * zt_apply(&dr).norm();
        let eps_pri = sqrt_n * opts.eps_abs + opts.eps_rel * ztnorm2.sqrt().max(rnorm2.sqrt()).max(ynorm);
        let eps_dual = sqrt_dim * opts.eps_abs + opts.eps_rel * rho * zt_apply(&u).norm();
        if pri <= eps_pri && dual_res <= eps_dual {
            converged = true;
            break;
        }
        if opts.balance > 0.0 && it % 10 == 0 {
            let new_rho = if pri > opts.balance * dual_res {
                rho * 2.0
            } else if dual_res > opts.balance * pri {
                rho / 2.0
            } else {
                rho
            };
            if new_rho != rho {
                for v in u.iter_mut() {
                    *v *= rho / new_rho;
                }
                rho = new_rho;
                chol = factor(rho)?;
            }
        }
    }
    if !converged {
        log::warn!("ADMM at tau = {tau}, lambda = {lambda} hit the iteration cap");
    }
    // recover mu, B and the coefficient functions on the grid
    let mu = DVector::from_fn(p, |k, _| theta[k]);
    // g_k (r-vector) -> b_k = U Lambda^{-1/2} g_k
    let mut b = DMatrix::<f64>::zeros(p, m);
    for k in 0..p {
        for (a, &idx) in keep.iter().enumerate() {
            let g = theta[(a + 1) * p + k] / eig.eigenvalues[idx].sqrt();
            for l in 0..m {
                b[(k, l)] += eig.eigenvectors[(l, idx)] * g;
            }
        }
    }
    let mut beta_grid = DMatrix::<f64>::zeros(p, m);
    for l in 0..m {
        for k in 0..p {
            beta_grid[(k, l)] = (0..q).map(|a| theta[a * p + k] * h[l][a]).sum();
        }
    }
    let fitted: Vec<f64> = (0..n_obs)
        .map(|o| {
            let i = layout.subject(o);
            let l = layout.location(o);
            (0..p).map(|k| data.x[(i, k)] * beta_grid[(k, l)]).sum()
        })
        .collect();
    let penalty = 0.5 * lambda * (p..dim).map(|idx| theta[idx] * theta[idx]).sum::<f64>();
    let objective = primal_objective(data, tau, &fitted, penalty);
    let dual: Vec<f64> = u.iter().map(|v| (v * rho).clamp(-(1.0 - tau), tau)).collect();
    let margin = FitOptions::default().interior_margin;
    let interior = (0..n_obs).filter(|&o| dual[o] > -(1.0 - tau) + margin && dual[o] < tau - margin).collect();
    let sd = data.response_sd();
    let mut stat = vec![0.0; p];
    for o in 0..n_obs {
        let i = layout.subject(o);
        for (k, s) in stat.iter_mut().enumerate() {
            *s += dual[o] * data.x[(i, k)];
        }
    }
    Ok(QuantileFit {
        tau,
        lambda,
        mu,
        b,
        dual,
        fitted,
        interior,
        kernel: kernel.clone(),
        locations: data.grid.clone(),
        beta_grid,
        objective,
        trace: Vec::new(),
        converged,
        iterations,
        stationarity: stat.iter().fold(0.0f64, |a, v| a.max(v.abs())),
        interp_tol: FitOptions::default().interp_tol * if sd > 0.0 { sd } else { 1.0 },
        n_subjects: data.n(),
    })
}
