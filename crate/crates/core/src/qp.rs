//! Box-constrained dual quadratic program with Kronecker-structured Hessian.
//!
//! The dual problem for a fixed intercept vector `mu` is
//!
//! ```text
//!     maximize   -(1/(2 lambda)) d' Q d + d' c
//!     subject to -(1 - tau) <= d_o <= tau
//! ```
//!
//! with `Q = Sigma (x) X X'`. Observations are indexed by `o`; for a fixed
//! design `o = i * m + j` (row-major over subject `i`, location `j`), and the
//! dual vector reshapes to the `n x m` matrix `D`. `Q d` is then `X X' D Sigma`.
//!
//! `Q` is never formed. The solver keeps `A = X' D` (per location, `p` values)
//! and `P = A Sigma`, so the gradient of a coordinate costs `O(p)` and the
//! cross-location refresh after each location block costs `O(p m)`.

use nalgebra::{DMatrix, SymmetricEigen};

/// Which subject and location each observation belongs to, with observations
/// grouped by location.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    n_subjects: usize,
    n_locations: usize,
    subject: Vec<usize>,
    location: Vec<usize>,
    by_location: Vec<Vec<usize>>,
}

impl Layout {
    /// Fixed design with observation `o = i * m + j`.
    pub fn fixed(n: usize, m: usize) -> Self {
        let subject = (0..n * m).map(|o| o / m).collect();
        let location = (0..n * m).map(|o| o % m).collect();
        Layout::new(n, m, subject, location)
    }

    pub fn new(n_subjects: usize, n_locations: usize, subject: Vec<usize>, location: Vec<usize>) -> Self {
        assert_eq!(subject.len(), location.len());
        let mut by_location = vec![Vec::new(); n_locations];
        for (o, &l) in location.iter().enumerate() {
            assert!(l < n_locations && subject[o] < n_subjects);
            by_location[l].push(o);
        }
        Layout { n_subjects, n_locations, subject, location, by_location }
    }

    pub fn n_obs(&self) -> usize {
        self.subject.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_locations(&self) -> usize {
        self.n_locations
    }

    pub fn subject(&self, o: usize) -> usize {
        self.subject[o]
    }

    pub fn location(&self, o: usize) -> usize {
        self.location[o]
    }

    pub fn by_location(&self) -> &[Vec<usize>] {
        &self.by_location
    }
}

/// `(X X') D Sigma` for an `n x m` dual matrix `D`, computed as `X (X' D) Sigma`.
///
/// Entry `(i, j)` equals `sum_{i', j'} d_{i'j'} (x_{i'}' x_i) Sigma_{j'j}`.
pub fn kron_matvec(sigma: &DMatrix<f64>, x: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(d.nrows(), x.nrows());
    assert_eq!(d.ncols(), sigma.nrows());
    let a = x.transpose() * d;
    let p = a * sigma;
    x * p
}

/// The reduced dual for one intercept vector.
#[derive(Debug, Clone, Copy)]
pub struct DualProblem<'a> {
    /// Kernel Gram over the distinct locations; `None` stands for the zero kernel.
    pub gram: Option<&'a DMatrix<f64>>,
    /// `n x p` covariates, one row per subject.
    pub x: &'a DMatrix<f64>,
    pub layout: &'a Layout,
    /// Linear term `c = y - X~' mu`, one entry per observation.
    pub linear: &'a [f64],
    pub tau: f64,
    pub lambda: f64,
    /// Constant added to every kernel entry. Zero for the plain reduced dual;
    /// positive values add the augmented-Lagrangian term `kappa/(2 lambda) |X~ d|^2`.
    pub constant_shift: f64,
}

impl DualProblem<'_> {
    pub fn lower(&self) -> f64 {
        -(1.0 - self.tau)
    }

    pub fn upper(&self) -> f64 {
        self.tau
    }

    fn validate(&self) {
        assert!(self.tau > 0.0 && self.tau < 1.0, "tau must lie in (0, 1)");
        assert!(self.lambda > 0.0, "lambda must be positive");
        assert!(self.constant_shift >= 0.0);
        assert_eq!(self.linear.len(), self.layout.n_obs());
        assert_eq!(self.x.nrows(), self.layout.n_subjects());
        if let Some(g) = self.gram {
            assert_eq!(g.nrows(), self.layout.n_locations());
            assert_eq!(g.ncols(), self.layout.n_locations());
        }
    }

    /// Default stopping tolerance `1e-7 (1 + |c|_inf)`.
    pub fn default_tol(&self) -> f64 {
        let cmax = self.linear.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        1e-7 * (1.0 + cmax)
    }
}

/// Algorithm used by [`solve_box_qp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpMethod {
    /// Mehrotra predictor-corrector in the kernel-factor space, then an exact
    /// active-set solve, then coordinate ascent to certify the result.
    InteriorPoint,
    /// Projected coordinate ascent only.
    CoordinateAscent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub method: QpMethod,
    /// Projected-gradient tolerance; `None` uses [`DualProblem::default_tol`].
    pub tol: Option<f64>,
    pub max_sweeps: usize,
    /// Passes over the currently violating coordinates between full sweeps.
    pub inner_passes: usize,
    pub max_ipm_iter: usize,
    pub max_active_set_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            method: QpMethod::InteriorPoint,
            tol: None,
            max_sweeps: 10_000,
            inner_passes: 4,
            max_ipm_iter: 100,
            max_active_set_iter: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktCertificate {
    /// Max over coordinates of the projected-gradient residual.
    pub residual: f64,
    pub tol: f64,
    pub converged: bool,
    pub sweeps: usize,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Dual variables, one per observation, each inside `[-(1 - tau), tau]`.
    pub dual: Vec<f64>,
    /// `A = X' D` per location, stored location-major (`a[l * p + k]`).
    pub weighted: Vec<f64>,
    /// `P = A Sigma`, same storage as `weighted`.
    pub smoothed: Vec<f64>,
    /// `S = sum_o d_o x_{i(o)}`.
    pub stationarity: Vec<f64>,
    pub objective: f64,
    /// Objective after every full sweep.
    pub trace: Vec<f64>,
    pub certificate: KktCertificate,
}

struct Workspace<'a> {
    prob: DualProblem<'a>,
    p: usize,
    xr: Vec<f64>,
    xnorm2: Vec<f64>,
    d: Vec<f64>,
    a: Vec<f64>,
    pm: Vec<f64>,
    s: Vec<f64>,
}

impl<'a> Workspace<'a> {
    fn new(prob: DualProblem<'a>, warm: Option<&[f64]>) -> Self {
        let n = prob.x.nrows();
        let p = prob.x.ncols();
        let mut xr = Vec::with_capacity(n * p);
        for i in 0..n {
            for k in 0..p {
                xr.push(prob.x[(i, k)]);
            }
        }
        let xnorm2 = (0..n).map(|i| xr[i * p..(i + 1) * p].iter().map(|v| v * v).sum()).collect();
        let (lo, hi) = (prob.lower(), prob.upper());
        let d = match warm {
            Some(w) => {
                assert_eq!(w.len(), prob.layout.n_obs());
                w.iter().map(|v| v.clamp(lo, hi)).collect()
            }
            None => vec![0.0; prob.layout.n_obs()],
        };
        let l = prob.layout.n_locations();
        let mut ws = Workspace { prob, p, xr, xnorm2, d, a: vec![0.0; l * p], pm: vec![0.0; l * p], s: vec![0.0; p] };
        ws.refresh();
        ws
    }

    fn xrow(&self, i: usize) -> &[f64] {
        &self.xr[i * self.p..(i + 1) * self.p]
    }

    /// Recompute `A`, `P` and `S` from `d` (removes drift from incremental updates).
    fn refresh(&mut self) {
        let p = self.p;
        let layout = self.prob.layout;
        let l_count = layout.n_locations();
        self.a.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..layout.n_obs() {
            let i = layout.subject(o);
            let l = layout.location(o);
            let d = self.d[o];
            if d != 0.0 {
                for k in 0..p {
                    self.a[l * p + k] += d * self.xr[i * p + k];
                }
            }
        }
        self.s.iter_mut().for_each(|v| *v = 0.0);
        for l in 0..l_count {
            for k in 0..p {
                self.s[k] += self.a[l * p + k];
            }
        }
        self.pm.iter_mut().for_each(|v| *v = 0.0);
        if let Some(g) = self.prob.gram {
            for l2 in 0..l_count {
                let col = g.column(l2);
                for l1 in 0..l_count {
                    let w = col[l1];
                    if w != 0.0 {
                        for k in 0..p {
                            self.pm[l2 * p + k] += self.a[l1 * p + k] * w;
                        }
                    }
                }
            }
        }
    }

    fn gradient(&self, o: usize) -> f64 {
        let layout = self.prob.layout;
        let i = layout.subject(o);
        let l = layout.location(o);
        let kappa = self.prob.constant_shift;
        let x = self.xrow(i);
        let mut acc = 0.0;
        for k in 0..self.p {
            acc += x[k] * (self.pm[l * self.p + k] + kappa * self.s[k]);
        }
        self.prob.linear[o] - acc / self.prob.lambda
    }

    fn residual(&self, o: usize) -> f64 {
        let g = self.gradient(o);
        let d = self.d[o];
        if d <= self.prob.lower() {
            g.max(0.0)
        } else if d >= self.prob.upper() {
            (-g).max(0.0)
        } else {
            g.abs()
        }
    }

    fn objective(&self) -> f64 {
        let lin: f64 = self.d.iter().zip(self.prob.linear).map(|(d, c)| d * c).sum();
        let quad: f64 = self.a.iter().zip(&self.pm).map(|(a, p)| a * p).sum::<f64>()
            + self.prob.constant_shift * self.s.iter().map(|v| v * v).sum::<f64>();
        lin - quad / (2.0 * self.prob.lambda)
    }

    /// One pass of exact coordinate maximization over the given per-location
    /// observation lists.
    fn sweep(&mut self, groups: &[Vec<usize>]) {
        let p = self.p;
        let lambda = self.prob.lambda;
        let kappa = self.prob.constant_shift;
        let (lo, hi) = (self.prob.lower(), self.prob.upper());
        let l_count = self.prob.layout.n_locations();
        let mut delta_a = vec![0.0; p];
        for (l, obs) in groups.iter().enumerate() {
            if obs.is_empty() {
                continue;
            }
            let sig_ll = self.prob.gram.map_or(0.0, |g| g[(l, l)]);
            let curv_loc = (sig_ll + kappa) / lambda;
            delta_a.iter_mut().for_each(|v| *v = 0.0);
            let mut moved = false;
            for &o in obs {
                let i = self.prob.layout.subject(o);
                let g = self.gradient(o);
                let h = curv_loc * self.xnorm2[i];
                let old = self.d[o];
                let new = if h > 0.0 {
                    (old + g / h).clamp(lo, hi)
                } else if g > 0.0 {
                    hi
                } else if g < 0.0 {
                    lo
                } else {
                    old
                };
                let delta = new - old;
                if delta != 0.0 {
                    moved = true;
                    self.d[o] = new;
                    for k in 0..p {
                        let dx = delta * self.xr[i * p + k];
                        delta_a[k] += dx;
                        self.pm[l * p + k] += dx * sig_ll;
                        self.s[k] += dx;
                    }
                }
            }
            if moved {
                for k in 0..p {
                    self.a[l * p + k] += delta_a[k];
                }
                if let Some(g) = self.prob.gram {
                    let row = g.column(l);
                    for l2 in 0..l_count {
                        if l2 == l {
                            continue;
                        }
                        let w = row[l2];
                        if w != 0.0 {
                            for k in 0..p {
                                self.pm[l2 * p + k] += delta_a[k] * w;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Eigenvalues below this fraction of the largest are dropped from a
/// [`KernelFactor`].
pub const DEFAULT_EIG_CUTOFF: f64 = 1e-16;

/// Low-rank factor `Sigma ~ Phi Phi'`, row `l` of `Phi` belonging to location `l`.
///
/// With it `Q + kappa J (x) X X'` equals `F F'` where row `o` of `F` is
/// `x_i (x) [phi_l, sqrt(kappa)]`, so Newton systems on the dual reduce to
/// `p q x p q` matrices.
#[derive(Debug, Clone)]
pub struct KernelFactor {
    m: usize,
    rank: usize,
    /// `m x rank`, row-major.
    phi: Vec<f64>,
}

impl KernelFactor {
    /// Factor of `gram` from its eigendecomposition; `None` is the zero kernel.
    pub fn new(gram: Option<&DMatrix<f64>>, cutoff: f64) -> Self {
        let Some(g) = gram else {
            return KernelFactor { m: 0, rank: 0, phi: Vec::new() };
        };
        let m = g.nrows();
        let eig = SymmetricEigen::new(g.clone());
        let emax = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
        let mut keep: Vec<usize> = (0..m).filter(|&j| eig.eigenvalues[j] > cutoff * emax).collect();
        keep.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let rank = keep.len();
        let mut phi = vec![0.0; m * rank];
        for (a, &j) in keep.iter().enumerate() {
            let sq = eig.eigenvalues[j].sqrt();
            for l in 0..m {
                phi[l * rank + a] = sq * eig.eigenvectors[(l, j)];
            }
        }
        KernelFactor { m, rank, phi }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    fn row(&self, l: usize) -> &[f64] {
        &self.phi[l * self.rank..(l + 1) * self.rank]
    }
}

/// Where a dual coordinate sits relative to its box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Lower,
    Free,
    Upper,
}

/// Exact bound membership of every coordinate.
pub fn classify(d: &[f64], lo: f64, hi: f64) -> Vec<Bound> {
    d.iter()
        .map(|&v| {
            if v <= lo {
                Bound::Lower
            } else if v >= hi {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect()
}

/// Result of the interior-point stage.
#[derive(Debug, Clone)]
pub struct IpmResult {
    /// Strictly interior iterate.
    pub dual: Vec<f64>,
    /// Predicted optimal face.
    pub class: Vec<Bound>,
    pub iterations: usize,
    /// Mean complementarity at exit.
    pub gap: f64,
}

/// Shared per-call data of the interior-point method: covariate rows and
/// factor rows extended by the `sqrt(kappa)` column.
struct FactorOps<'a> {
    layout: &'a Layout,
    p: usize,
    q: usize,
    xr: Vec<f64>,
    rows: Vec<f64>,
}

impl<'a> FactorOps<'a> {
    fn new(prob: &DualProblem<'a>, factor: &KernelFactor) -> Self {
        let layout = prob.layout;
        let m = layout.n_locations();
        let p = prob.x.ncols();
        let with_gram = prob.gram.is_some() && factor.rank > 0;
        if with_gram {
            assert_eq!(factor.m, m, "factor does not match the number of locations");
        }
        let r = if with_gram { factor.rank } else { 0 };
        let shift = prob.constant_shift > 0.0;
        let q = r + usize::from(shift);
        let mut rows = vec![0.0; m * q];
        for l in 0..m {
            if with_gram {
                rows[l * q..l * q + r].copy_from_slice(factor.row(l));
            }
            if shift {
                rows[l * q + r] = prob.constant_shift.sqrt();
            }
        }
        let n = prob.x.nrows();
        let xr = (0..n * p).map(|t| prob.x[(t / p, t % p)]).collect();
        FactorOps { layout, p, q, xr, rows }
    }

    fn dim(&self) -> usize {
        self.p * self.q
    }

    /// `F' v`, indexed `k * q + a`.
    fn ft(&self, v: &[f64]) -> Vec<f64> {
        let (p, q) = (self.p, self.q);
        let mut out = vec![0.0; p * q];
        let mut acc = vec![0.0; p];
        for (l, obs) in self.layout.by_location().iter().enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &o in obs {
                let i = self.layout.subject(o);
                for k in 0..p {
                    acc[k] += v[o] * self.xr[i * p + k];
                }
            }
            let row = &self.rows[l * q..(l + 1) * q];
            for k in 0..p {
                for a in 0..q {
                    out[k * q + a] += acc[k] * row[a];
                }
            }
        }
        out
    }

    /// `F eta`.
    fn f(&self, eta: &[f64], out: &mut [f64]) {
        let (p, q) = (self.p, self.q);
        let mut psi = vec![0.0; p];
        for (l, obs) in self.layout.by_location().iter().enumerate() {
            let row = &self.rows[l * q..(l + 1) * q];
            for k in 0..p {
                psi[k] = (0..q).map(|a| row[a] * eta[k * q + a]).sum();
            }
            for &o in obs {
                let i = self.layout.subject(o);
                out[o] = (0..p).map(|k| self.xr[i * p + k] * psi[k]).sum();
            }
        }
    }

    /// `lambda I + F' diag(theta) F`.
    fn normal_matrix(&self, theta: &[f64], lambda: f64) -> DMatrix<f64> {
        let (p, q) = (self.p, self.q);
        let dim = p * q;
        let mut h = vec![0.0; dim * dim];
        let mut c = vec![0.0; p * p];
        let mut outer = vec![0.0; q * q];
        for (l, obs) in self.layout.by_location().iter().enumerate() {
            c.iter_mut().for_each(|v| *v = 0.0);
            for &o in obs {
                let i = self.layout.subject(o);
                let x = &self.xr[i * p..(i + 1) * p];
                let t = theta[o];
                for k1 in 0..p {
                    let tx = t * x[k1];
                    for k2 in k1..p {
                        c[k1 * p + k2] += tx * x[k2];
                    }
                }
            }
            let row = &self.rows[l * q..(l + 1) * q];
            for a in 0..q {
                for b in 0..q {
                    outer[a * q + b] = row[a] * row[b];
                }
            }
            for k1 in 0..p {
                for k2 in k1..p {
                    let ck = c[k1 * p + k2];
                    if ck == 0.0 {
                        continue;
                    }
                    for b in 0..q {
                        let col1 = (k2 * q + b) * dim + k1 * q;
                        let col2 = (k1 * q + b) * dim + k2 * q;
                        let ob = &outer[b * q..(b + 1) * q];
                        for a in 0..q {
                            h[col1 + a] += ck * ob[a];
                        }
                        if k1 != k2 {
                            for a in 0..q {
                                h[col2 + a] += ck * ob[a];
                            }
                        }
                    }
                }
            }
        }
        for r in 0..dim {
            h[r * dim + r] += lambda;
        }
        DMatrix::from_vec(dim, dim, h)
    }
}

/// Mehrotra predictor-corrector method for the box QP.
///
/// It works on the primal-dual pair: the primal is
/// `min lambda/2 |w|^2 + sum_o rho_tau(c_o - F_o w)` with the residual split
/// as `u - v`, and `d` is the multiplier of `F w + u - v = c`. Each Newton
/// step solves one `p q x p q` system `lambda I + F' Theta F`. The primal
/// residual stays exact by construction, so the final `u`, `v` split predicts
/// the optimal face reliably even when the dual iterate is less accurate.
pub fn interior_point(prob: &DualProblem<'_>, factor: &KernelFactor, max_iter: usize) -> IpmResult {
    let ops = FactorOps::new(prob, factor);
    let n = prob.layout.n_obs();
    let lambda = prob.lambda;
    let (lo, hi) = (prob.lower(), prob.upper());
    let c = prob.linear;
    let cscale = 1.0 + c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let dim = ops.dim();

    let mut w = vec![0.0; dim];
    let mut d = vec![0.5 * (lo + hi); n];
    let mut sl = vec![d[0] - lo; n];
    let mut su = vec![hi - d[0]; n];
    let mean_abs_c = c.iter().map(|v| v.abs()).sum::<f64>() / n.max(1) as f64;
    let delta = (0.5 * mean_abs_c).max(1e-2 * cscale);
    let mut u: Vec<f64> = c.iter().map(|v| v.max(0.0) + delta).collect();
    let mut v: Vec<f64> = c.iter().map(|v| (-v).max(0.0) + delta).collect();

    let mut fw = vec![0.0; n];
    let mut rp = vec![0.0; n];
    let mut theta = vec![0.0; n];
    let mut e = vec![0.0; n];
    let mut dd = vec![0.0; n];
    let mut du = vec![0.0; n];
    let mut dv = vec![0.0; n];
    let mut tu = vec![0.0; n];
    let mut tv = vec![0.0; n];
    let mut iterations = 0;
    let mut gap = f64::INFINITY;
    let mut prev_res = f64::INFINITY;
    let mut stalled = 0;

    for it in 0..max_iter {
        ops.f(&w, &mut fw);
        for o in 0..n {
            rp[o] = c[o] - fw[o] - u[o] + v[o];
        }
        let ftd = ops.ft(&d);
        let rw: Vec<f64> = (0..dim).map(|t| lambda * w[t] - ftd[t]).collect();
        gap = (0..n).map(|o| su[o] * u[o] + sl[o] * v[o]).sum::<f64>() / (2 * n).max(1) as f64;
        let rp_max = rp.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let rw_max = rw.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let ftd_max = ftd.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if gap <= 1e-13 * cscale && rp_max <= 1e-11 * cscale && rw_max <= 1e-11 * (1.0 + ftd_max) {
            break;
        }
        // residuals that stop shrinking once the gap has closed sit at the rounding floor
        let res = rp_max / cscale + rw_max / (1.0 + ftd_max);
        if gap <= 1e-13 * cscale {
            stalled = if res > 0.5 * prev_res { stalled + 1 } else { 0 };
            if stalled >= 3 {
                break;
            }
        }
        prev_res = res;
        iterations = it + 1;
        for o in 0..n {
            theta[o] = 1.0 / (u[o] / su[o] + v[o] / sl[o]);
        }
        let chol = if dim > 0 {
            let h = ops.normal_matrix(&theta, lambda);
            let mut ch = h.clone().cholesky();
            // escalating ridge for normal matrices that lost definiteness to rounding
            let top = h.diagonal().amax();
            for eps in [1e-14, 1e-12, 1e-10, 1e-8] {
                if ch.is_some() {
                    break;
                }
                let mut bumped = h.clone();
                for r in 0..dim {
                    bumped[(r, r)] += eps * top;
                }
                ch = bumped.cholesky();
            }
            match ch {
                Some(ch) => Some(ch),
                None => break,
            }
        } else {
            None
        };
        // Delta w from (lambda I + F'Theta F) dw = F'Theta e - r_w, then
        // Delta d = Theta (e - F dw)
        let direction = |e: &[f64], dd: &mut [f64], fw_tmp: &mut [f64]| -> Vec<f64> {
            let dw = if let Some(ch) = &chol {
                let te: Vec<f64> = (0..n).map(|o| theta[o] * e[o]).collect();
                let t = ops.ft(&te);
                let rhs = nalgebra::DVector::from_iterator(dim, (0..dim).map(|k| t[k] - rw[k]));
                let sol = ch.solve(&rhs);
                ops.f(sol.as_slice(), fw_tmp);
                sol.as_slice().to_vec()
            } else {
                fw_tmp.iter_mut().for_each(|x| *x = 0.0);
                Vec::new()
            };
            for o in 0..n {
                dd[o] = theta[o] * (e[o] - fw_tmp[o]);
            }
            dw
        };
        let mut ftmp = vec![0.0; n];
        // predictor
        for o in 0..n {
            tu[o] = -su[o] * u[o];
            tv[o] = -sl[o] * v[o];
            e[o] = rp[o] - tu[o] / su[o] + tv[o] / sl[o];
        }
        direction(&e, &mut dd, &mut ftmp);
        for o in 0..n {
            du[o] = (tu[o] + u[o] * dd[o]) / su[o];
            dv[o] = (tv[o] - v[o] * dd[o]) / sl[o];
        }
        let a_aff = max_step(&sl, &su, &v, &u, &dd, &dv, &du);
        let gap_aff = (0..n)
            .map(|o| (su[o] - a_aff * dd[o]) * (u[o] + a_aff * du[o]) + (sl[o] + a_aff * dd[o]) * (v[o] + a_aff * dv[o]))
            .sum::<f64>()
            / (2 * n) as f64;
        let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3);
        let target = sigma * gap;
        // corrector
        for o in 0..n {
            tu[o] = target - su[o] * u[o] + dd[o] * du[o];
            tv[o] = target - sl[o] * v[o] - dd[o] * dv[o];
            e[o] = rp[o] - tu[o] / su[o] + tv[o] / sl[o];
        }
        let dw = direction(&e, &mut dd, &mut ftmp);
        for o in 0..n {
            du[o] = (tu[o] + u[o] * dd[o]) / su[o];
            dv[o] = (tv[o] - v[o] * dd[o]) / sl[o];
        }
        let alpha = (0.995 * max_step(&sl, &su, &v, &u, &dd, &dv, &du)).min(1.0);
        for (wk, dk) in w.iter_mut().zip(&dw) {
            *wk += alpha * dk;
        }
        for o in 0..n {
            d[o] += alpha * dd[o];
            sl[o] += alpha * dd[o];
            su[o] -= alpha * dd[o];
            u[o] += alpha * du[o];
            v[o] += alpha * dv[o];
        }
    }
    let class = (0..n)
        .map(|o| {
            if sl[o] * cscale < v[o] {
                Bound::Lower
            } else if su[o] * cscale < u[o] {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    IpmResult { dual: d, class, iterations, gap }
}

fn max_step(sl: &[f64], su: &[f64], zl: &[f64], zu: &[f64], dd: &[f64], dzl: &[f64], dzu: &[f64]) -> f64 {
    let mut a = f64::INFINITY;
    for o in 0..sl.len() {
        if dd[o] < 0.0 {
            a = a.min(-sl[o] / dd[o]);
        }
        if dd[o] > 0.0 {
            a = a.min(su[o] / dd[o]);
        }
        if dzl[o] < 0.0 {
            a = a.min(-zl[o] / dzl[o]);
        }
        if dzu[o] < 0.0 {
            a = a.min(-zu[o] / dzu[o]);
        }
    }
    a.min(1.0 / 0.995)
}

/// Exact solution on an optimal face found by [`refine_active_set`].
#[derive(Debug, Clone)]
pub struct ActiveSetSolution {
    pub dual: Vec<f64>,
    /// Multiplier `nu` of `sum_o d_o x_i = 0`; empty without that constraint.
    pub shift: Vec<f64>,
    pub class: Vec<Bound>,
    pub iterations: usize,
    /// Max projected-gradient residual of the returned point.
    pub residual: f64,
}

/// Largest free set handled by the dense active-set solve.
const MAX_FREE: usize = 2500;
const BULK_PASSES: usize = 3;

/// Primal-dual active-set iteration from a guessed face.
///
/// Bound coordinates are pinned; the free ones solve `(Q d)_o / lambda = c_o`.
/// With `equality` the constraint `sum_o d_o x_i = 0` is added together with
/// its multiplier `nu`, so that the free equations read
/// `(Q d)_o / lambda + x_i' nu = c_o` and the constant shift drops out. Free
/// coordinates that leave the box are pinned; pinned ones whose gradient
/// points inward by more than `tol` are freed. Returns `None` when the sets
/// fail to settle within `max_iter` solves or the free set is too large.
pub fn refine_active_set(
    prob: &DualProblem<'_>,
    start: &[f64],
    class: &[Bound],
    equality: bool,
    tol: f64,
    max_iter: usize,
) -> Option<ActiveSetSolution> {
    let n = prob.layout.n_obs();
    let p = prob.x.ncols();
    let (lo, hi) = (prob.lower(), prob.upper());
    let lambda = prob.lambda;
    let prob = DualProblem { constant_shift: if equality { 0.0 } else { prob.constant_shift }, ..*prob };
    let layout = prob.layout;
    let kappa = prob.constant_shift;
    let mut class = class.to_vec();
    let mut d: Vec<f64> = (0..n)
        .map(|o| match class[o] {
            Bound::Lower => lo,
            Bound::Upper => hi,
            Bound::Free => start[o].clamp(lo, hi),
        })
        .collect();
    let neq = if equality { p } else { 0 };
    // a free set far larger than the starting one means the face guess was poor
    let start_free = class.iter().filter(|c| **c == Bound::Free).count();
    let max_free = MAX_FREE.min(2 * start_free + 10 * p + 50);
    for it in 1..=max_iter {
        let free: Vec<usize> = (0..n).filter(|&o| class[o] == Bound::Free).collect();
        let nf = free.len();
        if nf > max_free {
            return None;
        }
        let mut pinned = d.clone();
        for &o in &free {
            pinned[o] = 0.0;
        }
        let ws = Workspace::new(prob, Some(&pinned));
        let dim = nf + neq;
        let mut kmat = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = nalgebra::DVector::<f64>::zeros(dim);
        for (a, &o) in free.iter().enumerate() {
            let i = layout.subject(o);
            let l = layout.location(o);
            let xi = ws.xrow(i);
            for (b, &o2) in free.iter().enumerate().skip(a) {
                let i2 = layout.subject(o2);
                let l2 = layout.location(o2);
                let xx: f64 = xi.iter().zip(ws.xrow(i2)).map(|(u, v)| u * v).sum();
                let sig = prob.gram.map_or(0.0, |g| g[(l, l2)]) + kappa;
                let v = xx * sig / lambda;
                kmat[(a, b)] = v;
                kmat[(b, a)] = v;
            }
            rhs[a] = ws.gradient(o);
            for k in 0..neq {
                kmat[(a, nf + k)] = xi[k];
                kmat[(nf + k, a)] = xi[k];
            }
        }
        for k in 0..neq {
            rhs[nf + k] = -ws.s[k];
        }
        // correction from the current point, so that a singular system keeps
        // the free coordinates near where the caller put them
        let base = nalgebra::DVector::from_fn(dim, |a, _| if a < nf { d[free[a]] } else { 0.0 });
        let resid = &rhs - &kmat * &base;
        let step = if dim == 0 {
            Some(nalgebra::DVector::<f64>::zeros(0))
        } else {
            let scale = resid.amax().max(f64::MIN_POSITIVE);
            kmat.clone()
                .lu()
                .solve(&resid)
                .filter(|v| v.iter().all(|x| x.is_finite()))
                .filter(|v| (&kmat * v - &resid).amax() <= 1e-10 * scale.max(tol))
                .or_else(|| regularized_solve(&kmat, &resid, nf))
        };
        let step = step?;
        let sol = base + step;
        // the first few passes pin every coordinate that leaves the box; after
        // that a ratio test advances only until the first one reaches its bound
        let mut t = 1.0f64;
        for (a, &o) in free.iter().enumerate() {
            let (from, to) = (d[o], sol[a]);
            if to > hi {
                t = t.min((hi - from) / (to - from));
            } else if to < lo {
                t = t.min((lo - from) / (to - from));
            }
        }
        let t = if it <= BULK_PASSES { 1.0 } else { t.clamp(0.0, 1.0) };
        let mut clamped = false;
        for (a, &o) in free.iter().enumerate() {
            let (from, to) = (d[o], sol[a]);
            let reach = if to > hi {
                (hi - from) / (to - from)
            } else if to < lo {
                (lo - from) / (to - from)
            } else {
                f64::INFINITY
            };
            if reach <= t * (1.0 + 1e-12) + 1e-15 {
                class[o] = if to > hi { Bound::Upper } else { Bound::Lower };
                d[o] = if to > hi { hi } else { lo };
                clamped = true;
            } else {
                d[o] = (from + t * (to - from)).clamp(lo, hi);
            }
        }
        if clamped {
            continue;
        }
        let nu: Vec<f64> = (0..neq).map(|k| sol[nf + k]).collect();
        let full = d.clone();
        let ws = Workspace::new(prob, Some(&full));
        let mut changed = false;
        let mut residual: f64 = 0.0;
        let mut bad_free = false;
        for o in 0..n {
            let i = layout.subject(o);
            let shift: f64 = (0..neq).map(|k| ws.xrow(i)[k] * nu[k]).sum();
            let g = ws.gradient(o) - shift;
            match class[o] {
                Bound::Free => {
                    residual = residual.max(g.abs());
                    if g.abs() > tol {
                        bad_free = true;
                    }
                }
                Bound::Lower => {
                    if g > tol {
                        class[o] = Bound::Free;
                        changed = true;
                    }
                    residual = residual.max(g.max(0.0));
                }
                Bound::Upper => {
                    if g < -tol {
                        class[o] = Bound::Free;
                        changed = true;
                    }
                    residual = residual.max((-g).max(0.0));
                }
            }
        }
        if bad_free {
            return None;
        }
        if equality && ws.s.iter().any(|v| v.abs() > tol) {
            return None;
        }
        if !changed {
            let class = classify(&full, lo, hi);
            return Some(ActiveSetSolution { dual: full, shift: nu, class, iterations: it, residual });
        }
    }
    None
}

/// Solves a possibly singular saddle-point system by a quasi-definite ridge
/// (`+eps` on the first `nf` diagonal entries, `-eps` on the rest) followed by
/// iterative refinement against the original matrix.
fn regularized_solve(kmat: &DMatrix<f64>, rhs: &nalgebra::DVector<f64>, nf: usize) -> Option<nalgebra::DVector<f64>> {
    let dim = kmat.nrows();
    let eps = 1e-10 * kmat.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut reg = kmat.clone();
    for r in 0..dim {
        reg[(r, r)] += if r < nf { eps } else { -eps };
    }
    let lu = reg.lu();
    let mut x = lu.solve(rhs)?;
    for _ in 0..5 {
        let r = rhs - kmat * &x;
        x += lu.solve(&r)?;
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Maximizes `-(1/(2 lambda)) d'Qd + d'c` over the box.
///
/// With [`QpMethod::InteriorPoint`] the Gram is factored on every call; use
/// [`solve_box_qp_factored`] to reuse a factor across calls.
pub fn solve_box_qp(prob: DualProblem<'_>, opts: &QpOptions, warm: Option<&[f64]>) -> QpSolution {
    prob.validate();
    match opts.method {
        QpMethod::CoordinateAscent => coordinate_ascent(prob, opts, warm),
        QpMethod::InteriorPoint => {
            let factor = KernelFactor::new(prob.gram, DEFAULT_EIG_CUTOFF);
            solve_box_qp_factored(prob, &factor, opts, warm)
        }
    }
}

/// [`solve_box_qp`] with a precomputed factor of `prob.gram`.
///
/// A warm start is first handed to the active-set solver. Failing that, the
/// interior-point method locates the optimal face and the active-set solver
/// finishes on it. Coordinate ascent then certifies the point (it only has
/// work left if both earlier stages fell short).
pub fn solve_box_qp_factored(
    prob: DualProblem<'_>,
    factor: &KernelFactor,
    opts: &QpOptions,
    warm: Option<&[f64]>,
) -> QpSolution {
    prob.validate();
    if opts.method == QpMethod::CoordinateAscent {
        return coordinate_ascent(prob, opts, warm);
    }
    let tol = opts.tol.unwrap_or_else(|| prob.default_tol());
    let (lo, hi) = (prob.lower(), prob.upper());
    let mut start = None;
    if let Some(w) = warm {
        let d: Vec<f64> = w.iter().map(|v| v.clamp(lo, hi)).collect();
        let class = classify(&d, lo, hi);
        start = refine_active_set(&prob, &d, &class, false, 0.1 * tol, opts.max_active_set_iter).map(|r| r.dual);
    }
    if start.is_none() {
        let ipm = interior_point(&prob, factor, opts.max_ipm_iter);
        start = Some(
            refine_active_set(&prob, &ipm.dual, &ipm.class, false, 0.1 * tol, opts.max_active_set_iter)
                .map_or(ipm.dual, |r| r.dual),
        );
    }
    coordinate_ascent(prob, opts, start.as_deref())
}

/// Maximizes `-(1/(2 lambda)) d'Qd + d'c` over the box by projected
/// coordinate ascent.
///
/// Each outer iteration is a full cyclic sweep followed by a few passes over
/// the coordinates whose projected-gradient residual exceeded the tolerance
/// (largest violators first within each location block). Every coordinate
/// step is an exact one-dimensional maximization followed by clipping, so the
/// objective never decreases.
fn coordinate_ascent(prob: DualProblem<'_>, opts: &QpOptions, warm: Option<&[f64]>) -> QpSolution {
    let tol = opts.tol.unwrap_or_else(|| prob.default_tol());
    let mut ws = Workspace::new(prob, warm);
    let all = prob.layout.by_location().to_vec();
    let n_obs = prob.layout.n_obs();
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    let mut converged = false;
    let mut active: Vec<Vec<usize>> = vec![Vec::new(); prob.layout.n_locations()];

    while sweeps < opts.max_sweeps {
        ws.sweep(&all);
        sweeps += 1;
        if sweeps % 16 == 0 {
            ws.refresh();
        }
        for _ in 0..opts.inner_passes {
            let mut count = 0;
            for (l, obs) in all.iter().enumerate() {
                let act = &mut active[l];
                act.clear();
                let mut scored: Vec<(f64, usize)> = obs
                    .iter()
                    .map(|&o| (ws.residual(o), o))
                    .filter(|(r, _)| *r > tol)
                    .collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                act.extend(scored.iter().map(|(_, o)| *o));
                count += act.len();
            }
            if count == 0 || count * 2 > n_obs {
                break;
            }
            ws.sweep(&active);
        }
        trace.push(ws.objective());
        residual = (0..n_obs).map(|o| ws.residual(o)).fold(0.0, f64::max);
        if residual <= tol {
            ws.refresh();
            residual = (0..n_obs).map(|o| ws.residual(o)).fold(0.0, f64::max);
            if residual <= tol {
                converged = true;
                break;
            }
        }
    }
    ws.refresh();
    let objective = ws.objective();
    QpSolution {
        dual: ws.d,
        weighted: ws.a,
        smoothed: ws.pm,
        stationarity: ws.s,
        objective,
        trace,
        certificate: KktCertificate { residual, tol, converged, sweeps },
    }
}

/// `A = X' D`, `P = A Sigma` and `S = sum_o d_o x_i` for a dual vector,
/// in the storage used by [`QpSolution`].
pub fn dual_products(gram: Option<&DMatrix<f64>>, x: &DMatrix<f64>, layout: &Layout, d: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let zeros = vec![0.0; layout.n_obs()];
    let prob = DualProblem { gram, x, layout, linear: &zeros, tau: 0.5, lambda: 1.0, constant_shift: 0.0 };
    let mut ws = Workspace::new(prob, None);
    ws.d.copy_from_slice(d);
    ws.refresh();
    (ws.a, ws.pm, ws.s)
}

/// Objective `-(1/(2 lambda)) d'Qd + d'c` evaluated directly from `d`.
pub fn dual_objective(prob: &DualProblem<'_>, d: &[f64]) -> f64 {
    let ws = Workspace::new(*prob, Some(d));
    ws.objective()
}

/// Max projected-gradient residual at `d`.
pub fn kkt_residual(prob: &DualProblem<'_>, d: &[f64]) -> f64 {
    let ws = Workspace::new(*prob, Some(d));
    (0..prob.layout.n_obs()).map(|o| ws.residual(o)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Dense `Q` in the row-major (subject, location) ordering.
    pub(crate) fn dense_q(sigma: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let m = sigma.nrows();
        let g = x * x.transpose();
        DMatrix::from_fn(n * m, n * m, |r, c| g[(r / m, c / m)] * sigma[(r % m, c % m)])
    }

    #[test]
    fn kron_matvec_scalar_and_zero() {
        let sigma = DMatrix::from_element(1, 1, 0.7);
        let x = DMatrix::from_element(1, 1, 2.0);
        let d = DMatrix::from_element(1, 1, -0.3);
        assert_relative_eq!(kron_matvec(&sigma, &x, &d)[(0, 0)], 4.0 * -0.3 * 0.7, epsilon = 1e-15);
        let z = DMatrix::zeros(1, 1);
        assert_eq!(kron_matvec(&sigma, &x, &z)[(0, 0)], 0.0);
    }

    #[test]
    fn kron_matvec_matches_dense_kronecker() {
        // deterministic pseudo-random entries
        let mut seed = 12345u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let (n, m, p) = (3, 4, 2);
        let x = DMatrix::from_fn(n, p, |_, _| rnd());
        let b = DMatrix::from_fn(m, m, |_, _| rnd());
        let sigma = &b * b.transpose();
        let d = DMatrix::from_fn(n, m, |_, _| rnd());
        let fast = kron_matvec(&sigma, &x, &d);
        let q = dense_q(&sigma, &x);
        let vec_d = nalgebra::DVector::from_fn(n * m, |r, _| d[(r / m, r % m)]);
        let dense = q * vec_d;
        for i in 0..n {
            for j in 0..m {
                assert_relative_eq!(fast[(i, j)], dense[i * m + j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn separable_problem_clips_unconstrained_optimum() {
        // Q = I with lambda = 1: n = 2 subjects with x = 1, one location, Sigma = 1
        // gives Q = [[1, 1], [1, 1]]; use two locations with one subject instead.
        let x = DMatrix::from_element(1, 1, 1.0);
        let sigma = DMatrix::<f64>::identity(2, 2);
        let layout = Layout::fixed(1, 2);
        let c = [0.5, -2.0];
        let prob = DualProblem {
            gram: Some(&sigma),
            x: &x,
            layout: &layout,
            linear: &c,
            tau: 0.5,
            lambda: 1.0,
            constant_shift: 0.0,
        };
        let sol = solve_box_qp(prob, &QpOptions::default(), None);
        assert!(sol.certificate.converged);
        assert_eq!(sol.dual, vec![0.5, -0.5]);
    }

    #[test]
    fn zero_linear_term_gives_zero_objective() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let layout = Layout::fixed(2, 2);
        let c = [0.0; 4];
        let prob = DualProblem {
            gram: Some(&sigma),
            x: &x,
            layout: &layout,
            linear: &c,
            tau: 0.3,
            lambda: 2.0,
            constant_shift: 0.0,
        };
        let sol = solve_box_qp(prob, &QpOptions::default(), None);
        assert!(sol.certificate.converged);
        assert!(sol.objective.abs() < 1e-12);
    }

    #[test]
    fn objective_trace_is_monotone() {
        let mut seed = 99u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let (n, m, p) = (6, 5, 2);
        let x = DMatrix::from_fn(n, p, |_, k| if k == 0 { 1.0 } else { rnd() });
        let grid = crate::kernels::Grid::linspace(0.0, 1.0, m);
        let sigma = crate::kernels::KernelSpec::gaussian(0.3).unwrap().gram_free(&grid).unwrap();
        let layout = Layout::fixed(n, m);
        let c: Vec<f64> = (0..n * m).map(|_| 3.0 * rnd()).collect();
        let prob = DualProblem {
            gram: Some(&sigma),
            x: &x,
            layout: &layout,
            linear: &c,
            tau: 0.3,
            lambda: 0.5,
            constant_shift: 0.0,
        };
        let sol = solve_box_qp(prob, &QpOptions { tol: Some(1e-12), ..Default::default() }, None);
        assert!(sol.certificate.converged);
        for w in sol.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0));
        }
        let (lo, hi) = (prob.lower(), prob.upper());
        assert!(sol.dual.iter().all(|d| *d >= lo && *d <= hi));
        assert_relative_eq!(sol.objective, dual_objective(&prob, &sol.dual), epsilon = 1e-12);
    }

    #[test]
    fn zero_kernel_with_shift_solves_lp_like_problem() {
        // median of {1, 2, 10}: with Sigma = 0 the augmented problem stays bounded
        let x = DMatrix::from_element(3, 1, 1.0);
        let layout = Layout::fixed(3, 1);
        let c = [1.0, 2.0, 10.0];
        let prob = DualProblem {
            gram: None,
            x: &x,
            layout: &layout,
            linear: &c,
            tau: 0.5,
            lambda: 1.0,
            constant_shift: 1.0,
        };
        let sol = solve_box_qp(prob, &QpOptions { tol: Some(1e-12), ..Default::default() }, None);
        assert!(sol.certificate.converged);
        assert!(kkt_residual(&prob, &sol.dual) <= 1e-12);
    }
}
