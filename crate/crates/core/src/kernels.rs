//! Reproducing kernels over observation locations, Gram matrices, kernel
//! vectors and the Matérn correlation family.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SqrError};
use crate::special::{bessel_k_scaled, ln_gamma_fn};

/// How locations were observed across subjects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Design {
    /// Every subject is observed at the same points.
    Fixed,
    /// Each subject has its own sampled points.
    Random,
}

/// Density the locations were sampled from. Only uniform is used for now.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingDensity {
    #[default]
    Uniform,
}

/// A set of observation locations in one or two dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    coords: Vec<f64>,
    design: Design,
    density: SamplingDensity,
}

impl Grid {
    /// Builds a grid from a flat row-major coordinate buffer of `dim`-vectors.
    pub fn new(dim: usize, coords: Vec<f64>, design: Design) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(SqrError::InvalidInput(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(SqrError::InvalidInput("coordinate buffer is not a multiple of the dimension".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(SqrError::InvalidInput("grid contains non-finite coordinates".into()));
        }
        Ok(Grid { dim, coords, design, density: SamplingDensity::Uniform })
    }

    pub fn from_1d(points: &[f64]) -> Result<Self> {
        Grid::new(1, points.to_vec(), Design::Fixed)
    }

    /// `m` evenly spaced points on `[a, b]`.
    pub fn linspace(a: f64, b: f64, m: usize) -> Self {
        let pts: Vec<f64> = if m == 1 {
            vec![a]
        } else {
            (0..m).map(|j| a + (b - a) * j as f64 / (m - 1) as f64).collect()
        };
        Grid { dim: 1, coords: pts, design: Design::Fixed, density: SamplingDensity::Uniform }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn design(&self) -> Design {
        self.design
    }

    pub fn density(&self) -> SamplingDensity {
        self.density
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks(self.dim)
    }

    /// Euclidean distance between points `j` and `k`.
    pub fn distance(&self, j: usize, k: usize) -> f64 {
        euclidean(self.point(j), self.point(k))
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let m = self.len();
        let mut d: f64 = 0.0;
        if self.dim == 1 {
            let (lo, hi) = self
                .coords
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
            return if m == 0 { 0.0 } else { hi - lo };
        }
        for j in 0..m {
            for k in j + 1..m {
                d = d.max(self.distance(j, k));
            }
        }
        d
    }

    /// Check that a one-dimensional grid is evenly spaced (relative tolerance 1e-9).
    /// Returns the spacing when it is.
    pub fn regular_spacing(&self) -> Option<f64> {
        if self.dim != 1 || self.len() < 2 {
            return None;
        }
        let mut sorted = self.coords.clone();
        sorted.sort_by(f64::total_cmp);
        let step = (sorted[sorted.len() - 1] - sorted[0]) / (sorted.len() - 1) as f64;
        if step <= 0.0 {
            return None;
        }
        let ok = sorted
            .windows(2)
            .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-9 * step.max(1.0));
        ok.then_some(step)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sq_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kernel families supported for the coefficient functions.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelFamily {
    /// `exp(-|s - t|^2 / (2 sigma^2))`
    Gaussian { sigma: f64 },
    /// `exp(-sigma |s - t|_1)`
    Laplace { sigma: f64 },
    /// `(<s, t> + sigma2)^degree`
    Polynomial { sigma2: f64, degree: u32 },
    /// `sigma^2 / (sigma^2 + |s - t|^2)`
    InverseQuadratic { sigma: f64 },
    /// `c1 K1 + c2 K2`
    WeightedSum { c1: f64, k1: Box<KernelFamily>, c2: f64, k2: Box<KernelFamily> },
}

impl KernelFamily {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SqrError::InvalidSpec(msg));
        match self {
            KernelFamily::Gaussian { sigma }
            | KernelFamily::Laplace { sigma }
            | KernelFamily::InverseQuadratic { sigma } => {
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return bad(format!("kernel scale must be positive, got {sigma}"));
                }
            }
            KernelFamily::Polynomial { sigma2, .. } => {
                if !(*sigma2 >= 0.0 && sigma2.is_finite()) {
                    return bad(format!("polynomial offset must be nonnegative, got {sigma2}"));
                }
            }
            KernelFamily::WeightedSum { c1, k1, c2, k2 } => {
                if !(*c1 >= 0.0 && *c2 >= 0.0 && c1.is_finite() && c2.is_finite()) {
                    return bad(format!("mixture weights must be nonnegative, got {c1}, {c2}"));
                }
                k1.validate()?;
                k2.validate()?;
            }
        }
        Ok(())
    }

    pub fn eval(&self, s: &[f64], t: &[f64]) -> f64 {
        match self {
            KernelFamily::Gaussian { sigma } => (-sq_euclidean(s, t) / (2.0 * sigma * sigma)).exp(),
            KernelFamily::Laplace { sigma } => {
                let l1: f64 = s.iter().zip(t).map(|(a, b)| (a - b).abs()).sum();
                (-sigma * l1).exp()
            }
            KernelFamily::Polynomial { sigma2, degree } => {
                let dot: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
                (dot + sigma2).powi(*degree as i32)
            }
            KernelFamily::InverseQuadratic { sigma } => {
                let s2 = sigma * sigma;
                s2 / (s2 + sq_euclidean(s, t))
            }
            KernelFamily::WeightedSum { c1, k1, c2, k2 } => c1 * k1.eval(s, t) + c2 * k2.eval(s, t),
        }
    }
}

/// Diagonal ridge added to Gram matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Jitter {
    /// Multiple of the mean diagonal.
    Relative(f64),
    Absolute(f64),
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter::Relative(1e-8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub jitter: Jitter,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Result<Self> {
        let spec = KernelSpec { family, jitter: Jitter::default() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        KernelSpec::new(KernelFamily::Gaussian { sigma })
    }

    pub fn with_jitter(mut self, jitter: Jitter) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        let j = match self.jitter {
            Jitter::Relative(v) | Jitter::Absolute(v) => v,
        };
        if !(j >= 0.0 && j.is_finite()) {
            return Err(SqrError::InvalidSpec(format!("jitter must be nonnegative, got {j}")));
        }
        Ok(())
    }

    pub fn eval(&self, s: &[f64], t: &[f64]) -> f64 {
        self.family.eval(s, t)
    }

    /// Gram matrix without the diagonal ridge. Used wherever the matrix must
    /// agree exactly with [`kvec`].
    pub fn gram_free(&self, grid: &Grid) -> Result<DMatrix<f64>> {
        self.validate()?;
        let m = grid.len();
        let mut g = DMatrix::zeros(m, m);
        for j in 0..m {
            for l in j..m {
                let v = self.eval(grid.point(j), grid.point(l));
                if !v.is_finite() {
                    return Err(SqrError::InvalidSpec(format!("kernel value at ({j}, {l}) is not finite")));
                }
                g[(j, l)] = v;
                g[(l, j)] = v;
            }
        }
        Ok(g)
    }

    pub fn jitter_amount(&self, gram_free: &DMatrix<f64>) -> f64 {
        match self.jitter {
            Jitter::Absolute(v) => v,
            Jitter::Relative(v) => {
                let m = gram_free.nrows().max(1);
                v * gram_free.diagonal().sum() / m as f64
            }
        }
    }
}

/// Gram matrix `K(s_j, s_l) + jitter * 1{j = l}`, verified symmetric PSD
/// (smallest eigenvalue no lower than `-1e-8 * ||Sigma||`).
pub fn gram(spec: &KernelSpec, grid: &Grid) -> Result<DMatrix<f64>> {
    if grid.is_empty() {
        return Err(SqrError::InvalidInput("empty grid".into()));
    }
    let mut g = spec.gram_free(grid)?;
    let jit = spec.jitter_amount(&g);
    for j in 0..g.nrows() {
        g[(j, j)] += jit;
    }
    // Sigma + delta I must factor when min eig >= -1e-8 ||Sigma||.
    let norm = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let delta = 2e-8 * norm.max(f64::MIN_POSITIVE) + 1e-300;
    let mut shifted = g.clone();
    for j in 0..shifted.nrows() {
        shifted[(j, j)] += delta;
    }
    if shifted.cholesky().is_none() {
        return Err(SqrError::InvalidSpec("kernel Gram matrix is not positive semidefinite".into()));
    }
    Ok(g)
}

/// Kernel vector `(K(s, s_1), ..., K(s, s_m))`.
pub fn kvec(spec: &KernelSpec, grid: &Grid, s: &[f64]) -> DVector<f64> {
    DVector::from_iterator(grid.len(), grid.points().map(|p| spec.eval(s, p)))
}

/// Matérn correlation `2^{1-nu}/Gamma(nu) (alpha h)^nu K_nu(alpha h)`.
///
/// Closed forms are used for nu in {1/2, 3/2, 5/2}; other orders go through
/// the numeric Bessel routine. Underflows to 0 for very large `alpha * h`.
pub fn matern(h: f64, alpha: f64, nu: f64) -> f64 {
    debug_assert!(h >= 0.0 && alpha > 0.0 && nu > 0.0);
    let x = alpha * h;
    if x == 0.0 {
        return 1.0;
    }
    if !x.is_finite() {
        return 0.0;
    }
    if nu == 0.5 {
        (-x).exp()
    } else if nu == 1.5 {
        (1.0 + x) * (-x).exp()
    } else if nu == 2.5 {
        (1.0 + x + x * x / 3.0) * (-x).exp()
    } else {
        matern_bessel(x, nu)
    }
}

/// Matérn correlation at scaled distance `x = alpha h` through the Bessel
/// function, in log space.
pub fn matern_bessel(x: f64, nu: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if x < 1e-10 {
        // K_nu(x) ~ Gamma(nu) 2^{nu-1} x^{-nu}
        return 1.0;
    }
    let ln_val = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma_fn(nu) + nu * x.ln()
        + bessel_k_scaled(nu, x).ln()
        - x;
    let v = ln_val.exp();
    if v.is_finite() {
        v.min(1.0)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn no_jitter(spec: KernelSpec) -> KernelSpec {
        spec.with_jitter(Jitter::Absolute(0.0))
    }

    #[test]
    fn gaussian_gram_two_points() {
        let spec = no_jitter(KernelSpec::gaussian(0.2).unwrap());
        let grid = Grid::from_1d(&[0.0, 0.2]).unwrap();
        let g = gram(&spec, &grid).unwrap();
        let off = (-0.5f64).exp();
        assert_relative_eq!(g[(0, 0)], 1.0);
        assert_relative_eq!(g[(0, 1)], off, epsilon = 1e-15);
        assert_relative_eq!(g[(1, 0)], 0.6065306597126334, epsilon = 1e-15);
    }

    #[test]
    fn single_point_gram_is_one_plus_jitter() {
        let grid = Grid::from_1d(&[0.3]).unwrap();
        for fam in [
            KernelFamily::Gaussian { sigma: 0.5 },
            KernelFamily::Laplace { sigma: 2.0 },
            KernelFamily::InverseQuadratic { sigma: 1.0 },
        ] {
            let spec = KernelSpec::new(fam).unwrap().with_jitter(Jitter::Absolute(1e-3));
            let g = gram(&spec, &grid).unwrap();
            assert_relative_eq!(g[(0, 0)], 1.001, epsilon = 1e-15);
        }
    }

    #[test]
    fn weighted_sum_of_identical_gaussians_matches_single() {
        let g1 = KernelFamily::Gaussian { sigma: 0.3 };
        let sum = KernelFamily::WeightedSum {
            c1: 0.5,
            k1: Box::new(g1.clone()),
            c2: 0.5,
            k2: Box::new(g1.clone()),
        };
        let grid = Grid::linspace(0.0, 1.0, 7);
        let a = gram(&no_jitter(KernelSpec::new(g1).unwrap()), &grid).unwrap();
        let b = gram(&no_jitter(KernelSpec::new(sum).unwrap()), &grid).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn kvec_values_and_consistency() {
        let spec = KernelSpec::gaussian(0.2).unwrap();
        let grid = Grid::from_1d(&[0.0, 1.0]).unwrap();
        let k = kvec(&spec, &grid, &[0.5]);
        let e = (-3.125f64).exp();
        assert_relative_eq!(k[0], e, epsilon = 1e-16);
        assert_relative_eq!(k[1], e, epsilon = 1e-16);

        let grid = Grid::linspace(0.0, 1.0, 9);
        let free = spec.gram_free(&grid).unwrap();
        for j in 0..grid.len() {
            let kj = kvec(&spec, &grid, grid.point(j));
            for l in 0..grid.len() {
                assert_eq!(kj[l].to_bits(), free[(l, j)].to_bits());
            }
        }
        let far = kvec(&spec, &grid, &[100.0]);
        assert!(far.iter().all(|v| *v < 1e-15));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Laplace { sigma: -1.0 }).is_err());
        let bad = KernelFamily::WeightedSum {
            c1: -1.0,
            k1: Box::new(KernelFamily::Gaussian { sigma: 1.0 }),
            c2: 1.0,
            k2: Box::new(KernelFamily::Gaussian { sigma: 1.0 }),
        };
        assert!(KernelSpec::new(bad).is_err());
        // overflow in polynomial kernel
        let spec = KernelSpec::new(KernelFamily::Polynomial { sigma2: 1.0, degree: 400 }).unwrap();
        let grid = Grid::from_1d(&[1e3, 2e3]).unwrap();
        assert!(matches!(gram(&spec, &grid), Err(SqrError::InvalidSpec(_))));
    }

    #[test]
    fn matern_reference_values() {
        assert_eq!(matern(0.0, 1.0, 2.5), 1.0);
        assert_relative_eq!(matern(1.0, 1.0, 0.5), (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(matern(1.0, 1.0, 2.5), (7.0 / 3.0) * (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(matern(1.0, 1.0, 2.5), 0.8583, epsilon = 1e-4);
        assert_relative_eq!(matern_bessel(1.0, 2.5), matern(1.0, 1.0, 2.5), epsilon = 1e-10);
        assert_eq!(matern(1e6, 1e6, 1.3), 0.0);
        assert!(matern(1e-300, 1.0, 1.3) <= 1.0);
    }

    #[test]
    fn matern_is_nonincreasing() {
        for &nu in &[0.5, 0.8, 1.5, 2.5, 3.7] {
            for &alpha in &[0.3, 1.0, 5.0] {
                let mut prev = 1.0;
                for k in 0..2000 {
                    let h = k as f64 * 0.005;
                    let v = matern(h, alpha, nu);
                    assert!(v <= prev + 1e-15, "nu {nu} alpha {alpha} h {h}");
                    assert!(!v.is_nan());
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn regular_spacing_detection() {
        assert_relative_eq!(Grid::linspace(0.0, 1.0, 11).regular_spacing().unwrap(), 0.1, epsilon = 1e-12);
        assert!(Grid::from_1d(&[0.0, 0.1, 0.5]).unwrap().regular_spacing().is_none());
    }
}
