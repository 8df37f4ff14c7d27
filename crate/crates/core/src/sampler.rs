//! Conditional generative model: marginal quantile curves from the fitted
//! surface glued together by the Student-t copula.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::copula::{correlation_matrix, CopulaFit};
use crate::error::{Result, SqrError};
use crate::kernels::Grid;
use crate::special::StudentT;
use crate::sqr::QuantileSurface;

#[derive(Debug, Clone)]
pub struct GenerativeModel {
    pub surface: QuantileSurface,
    pub copula: CopulaFit,
    pub grid: Grid,
}

/// Draws from [`GenerativeModel::sample_y`].
#[derive(Debug, Clone)]
pub struct Samples {
    /// `n_samples x m` responses.
    pub y: DMatrix<f64>,
    /// `n_samples x m` copula levels before marginal inversion.
    pub u: DMatrix<f64>,
}

/// Interpolated quantile at `tau` from a nondecreasing curve on `taus`,
/// clamped to the grid range.
pub fn interpolate_quantile(taus: &[f64], q: &[f64], tau: f64) -> f64 {
    let k = taus.len();
    if tau <= taus[0] {
        return q[0];
    }
    if tau >= taus[k - 1] {
        return q[k - 1];
    }
    let b = taus.partition_point(|t| *t <= tau);
    let a = b - 1;
    if taus[a] == tau {
        return q[a];
    }
    let w = (tau - taus[a]) / (taus[b] - taus[a]);
    q[a] + w * (q[b] - q[a])
}

/// Inverse of [`interpolate_quantile`]: the level at which the curve reaches
/// `y`, clamped to the grid range. Flat stretches map to their midpoint.
pub fn interpolate_level(taus: &[f64], q: &[f64], y: f64) -> f64 {
    let k = taus.len();
    if y < q[0] {
        return taus[0];
    }
    if y > q[k - 1] {
        return taus[k - 1];
    }
    let a = q.partition_point(|v| *v < y);
    let b = q.partition_point(|v| *v <= y);
    if a < b {
        return 0.5 * (taus[a] + taus[b - 1]);
    }
    let lo = a - 1;
    let w = (y - q[lo]) / (q[a] - q[lo]);
    taus[lo] + w * (taus[a] - taus[lo])
}

impl GenerativeModel {
    pub fn new(surface: QuantileSurface, copula: CopulaFit, grid: Grid) -> Result<Self> {
        if !(copula.dof > 2.0) {
            return Err(SqrError::InvalidInput(format!("copula degrees of freedom must exceed 2, got {}", copula.dof)));
        }
        if !surface.monotonized {
            return Err(SqrError::InvalidInput("the quantile surface must be monotonized".into()));
        }
        if grid.is_empty() {
            return Err(SqrError::InvalidInput("sampling grid is empty".into()));
        }
        Ok(GenerativeModel { surface, copula, grid })
    }

    fn taus(&self) -> &[f64] {
        &self.surface.taus
    }

    /// Quantile curve at every grid point.
    pub fn curves(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let same = self.surface.fits[0].locations == self.grid;
        (0..self.grid.len())
            .map(|j| {
                if same {
                    self.surface.quantiles_at_location(x, j)
                } else {
                    self.surface.quantiles(x, self.grid.point(j))
                }
            })
            .collect()
    }

    pub fn marginal_quantile(&self, x: &[f64], s: &[f64], tau: f64) -> f64 {
        let taus = self.taus();
        if tau < taus[0] || tau > taus[taus.len() - 1] {
            log::warn!("tau = {tau} lies outside the fitted grid and is clamped");
        }
        interpolate_quantile(taus, &self.surface.quantiles(x, s), tau)
    }

    pub fn marginal_cdf(&self, x: &[f64], s: &[f64], y: f64) -> f64 {
        interpolate_level(self.taus(), &self.surface.quantiles(x, s), y)
    }

    /// Marginal p-values of an observed curve on the model grid.
    pub fn pvalue_curve(&self, x_ref: &[f64], y_obs: &[f64]) -> Result<Vec<f64>> {
        if y_obs.len() != self.grid.len() {
            return Err(SqrError::InvalidInput(format!(
                "observed curve has {} values but the grid has {}",
                y_obs.len(),
                self.grid.len()
            )));
        }
        let curves = self.curves(x_ref);
        Ok(curves.iter().zip(y_obs).map(|(q, y)| interpolate_level(self.taus(), q, *y)).collect())
    }

    /// `n_samples` draws of the whole curve given `x`. See [`draw_curves`].
    pub fn sample_y(&self, x: &[f64], n_samples: usize, seed: u64) -> Result<Samples> {
        let corr = correlation_matrix(x, &self.copula, &self.grid);
        draw_curves(self.taus(), &self.curves(x), &corr, self.copula.dof, n_samples, seed)
    }
}

/// Draws curves whose marginal at location `j` follows the quantile curve
/// `curves[j]` on `taus`, coupled by a t copula with correlation `corr`.
///
/// Sample `r` uses its own ChaCha stream `r` under `seed`: `m` normals in
/// grid order followed by one chi-squared variate.
pub fn draw_curves(
    taus: &[f64],
    curves: &[Vec<f64>],
    corr: &DMatrix<f64>,
    dof: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Samples> {
    let m = curves.len();
    if corr.nrows() != m || corr.ncols() != m {
        return Err(SqrError::InvalidInput(format!("correlation is {}x{} but there are {m} curves", corr.nrows(), corr.ncols())));
    }
    if !(dof > 2.0) {
        return Err(SqrError::InvalidInput(format!("copula degrees of freedom must exceed 2, got {dof}")));
    }
    let chol = jittered_cholesky(corr)?;
    let dist = StudentT::new(dof);
    let chi = ChiSquared::new(dof).map_err(|e| SqrError::Numerical(e.to_string()))?;
    let mut y = DMatrix::zeros(n_samples, m);
    let mut u = DMatrix::zeros(n_samples, m);
    for r in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let eps = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        let w: f64 = chi.sample(&mut rng);
        let z = &chol * eps * (dof / w).sqrt();
        for j in 0..m {
            let level = dist.cdf(z[j]);
            u[(r, j)] = level;
            y[(r, j)] = interpolate_quantile(taus, &curves[j], level);
        }
    }
    Ok(Samples { y, u })
}

/// Lower Cholesky factor of `c + jitter I`, escalating the jitter tenfold
/// from `1e-10` to `1e-6`.
pub fn jittered_cholesky(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut jitter = 1e-10;
    while jitter <= 1e-6 * (1.0 + 1e-9) {
        let shifted = c + DMatrix::identity(c.nrows(), c.ncols()) * jitter;
        if let Some(ch) = shifted.cholesky() {
            return Ok(ch.l());
        }
        jitter *= 10.0;
    }
    Err(SqrError::NotPositiveDefinite { jitter: 1e-6 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quantile_and_level_round_trip_on_grid() {
        let taus = [0.1, 0.3, 0.5, 0.7, 0.9];
        let q = [-2.0, -0.5, 0.0, 1.0, 4.0];
        for (t, v) in taus.iter().zip(&q) {
            assert_eq!(interpolate_quantile(&taus, &q, *t), *v);
            assert_relative_eq!(interpolate_level(&taus, &q, *v), *t, epsilon = 1e-10);
        }
        assert_eq!(interpolate_level(&taus, &q, 10.0), 0.9);
        assert_eq!(interpolate_level(&taus, &q, -10.0), 0.1);
        assert_eq!(interpolate_quantile(&taus, &q, 0.01), -2.0);
        assert_relative_eq!(interpolate_quantile(&taus, &q, 0.6), 0.5);
    }

    #[test]
    fn flat_stretch_maps_to_midpoint() {
        let taus = [0.1, 0.3, 0.5, 0.7];
        let q = [0.0, 1.0, 1.0, 2.0];
        assert_relative_eq!(interpolate_level(&taus, &q, 1.0), 0.4);
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        let c = DMatrix::from_element(3, 3, 1.0);
        let l = jittered_cholesky(&c).unwrap();
        assert!((&l * l.transpose() - &c).amax() < 1e-8);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(jittered_cholesky(&bad).is_err());
    }
}
