//! Uniform interfaces for score models and log-densities, plus closed-form oracles.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// `score(x, σ) ≈ ∇ₓ log p_σ(x)`, evaluated row-wise on a batch.
pub trait ScoreModel: Sync {
    /// Implementation tag, e.g. `analytic-gmm` or `mlp-denoiser`.
    fn kind(&self) -> &'static str;

    fn score(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>>;
}

/// Row-wise log-density evaluator.
pub trait LogDensity: Sync {
    fn log_density(&self, x: ArrayView2<f64>) -> Result<Array1<f64>>;
}

impl<T: ScoreModel + ?Sized> ScoreModel for &T {
    fn kind(&self) -> &'static str {
        (**self).kind()
    }
    fn score(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        (**self).score(x, sigma)
    }
}

impl<T: LogDensity + ?Sized> LogDensity for &T {
    fn log_density(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        (**self).log_density(x)
    }
}

/// Score of a point mass at the origin noised to level σ: `−x/σ²`.
#[derive(Clone, Copy, Debug, Default)]
pub struct PointMassScore;

impl ScoreModel for PointMassScore {
    fn kind(&self) -> &'static str {
        "point-oracle"
    }

    fn score(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        if sigma <= 0.0 {
            return Err(Error::config("point-mass score needs σ > 0"));
        }
        Ok(x.mapv(|v| -v / (sigma * sigma)))
    }
}

/// Exact score of `N(0, s²I)` noised to σ: `−x/(s² + σ²)`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianScore {
    pub variance: f64,
}

impl ScoreModel for GaussianScore {
    fn kind(&self) -> &'static str {
        "gaussian-oracle"
    }

    fn score(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        let v = self.variance + sigma * sigma;
        Ok(x.mapv(|xi| -xi / v))
    }
}

/// The zero score: pure diffusion with no drift.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroScore;

impl ScoreModel for ZeroScore {
    fn kind(&self) -> &'static str {
        "zero-oracle"
    }

    fn score(&self, x: ArrayView2<f64>, _sigma: f64) -> Result<Array2<f64>> {
        Ok(Array2::zeros(x.raw_dim()))
    }
}

/// Isotropic centred Gaussian `N(0, σ²I)`, the long-horizon reference law π∞.
#[derive(Clone, Copy, Debug)]
pub struct IsoGaussian {
    pub sigma: f64,
}

impl LogDensity for IsoGaussian {
    fn log_density(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if self.sigma <= 0.0 {
            return Err(Error::config("isotropic Gaussian needs σ > 0"));
        }
        let d = x.ncols() as f64;
        let var = self.sigma * self.sigma;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * var).ln();
        Ok(x.rows()
            .into_iter()
            .map(|r| norm - 0.5 * r.dot(&r) / var)
            .collect())
    }
}
