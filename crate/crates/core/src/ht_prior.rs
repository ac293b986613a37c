//! Heavy-tail-aware initialization: Hill tail-index estimation and sampling
//! from a symmetric Student-t mixture convolved with `N(0, σ_T² I)`.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::median;
use crate::targets::{sample_t_mixture, Provenance, SampleBatch, Tail};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HillConfig {
    /// Number of upper order statistics.
    pub k: usize,
    /// Estimate each coordinate separately and take the median; otherwise
    /// pool every coordinate into one sample.
    pub per_dimension: bool,
    /// Subtract the median before taking absolute values.
    pub center: bool,
}

impl Default for HillConfig {
    fn default() -> Self {
        Self {
            k: 350,
            per_dimension: true,
            center: true,
        }
    }
}

/// Hill estimate of the tail index of a one-dimensional sample.
pub fn hill_1d(values: ArrayView1<f64>, k: usize, center: bool) -> Result<f64> {
    let n = values.len();
    if k < 2 || k >= n {
        return Err(Error::config(format!("Hill order k = {k} must satisfy 2 ≤ k < n = {n}")));
    }
    let mut x: Vec<f64> = values.to_vec();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Estimation("non-finite sample".into()));
    }
    if center {
        let m = median(&mut x.clone());
        x.iter_mut().for_each(|v| *v = (*v - m).abs());
    } else {
        x.iter_mut().for_each(|v| *v = v.abs());
    }
    x.sort_by(f64::total_cmp);
    let threshold = x[n - k - 1];
    if !(threshold > 0.0) {
        return Err(Error::Estimation(format!(
            "order statistic X_(n-k) = {threshold} is not positive"
        )));
    }
    let lt = threshold.ln();
    let h = x[n - k..].iter().map(|v| v.ln() - lt).sum::<f64>() / k as f64;
    if !(h > 0.0) {
        return Err(Error::Estimation("upper tail is degenerate".into()));
    }
    Ok(1.0 / h)
}

/// Per-coordinate estimates (one entry when pooling).
pub fn hill_per_dimension(samples: ArrayView2<f64>, cfg: &HillConfig) -> Result<Vec<f64>> {
    if cfg.per_dimension {
        samples
            .axis_iter(Axis(1))
            .map(|col| hill_1d(col, cfg.k, cfg.center))
            .collect()
    } else {
        let pooled: Array1<f64> = if cfg.center {
            let mut cols = Vec::with_capacity(samples.len());
            for col in samples.axis_iter(Axis(1)) {
                let m = median(&mut col.to_vec());
                cols.extend(col.iter().map(|v| v - m));
            }
            Array1::from(cols)
        } else {
            samples.iter().copied().collect()
        };
        Ok(vec![hill_1d(pooled.view(), cfg.k, false)?])
    }
}

/// Median of the per-coordinate Hill estimates.
pub fn hill_estimate(samples: &SampleBatch, cfg: &HillConfig) -> Result<f64> {
    let mut per = hill_per_dimension(samples.view(), cfg)?;
    Ok(median(&mut per))
}

/// Coordinate-wise median of the rows whose coordinate mean is positive.
pub fn estimate_location(samples: &SampleBatch) -> Result<Array1<f64>> {
    let x = samples.view();
    let rows: Vec<usize> = x
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, r)| r.sum() > 0.0)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::Estimation("no sample has a positive projection".into()));
    }
    let upper = x.select(Axis(0), &rows);
    Ok(upper
        .axis_iter(Axis(1))
        .map(|col| median(&mut col.to_vec()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HtPriorSpec {
    pub tail: Tail,
    pub sigma_t: f64,
    /// Location of the positive component; the other sits at its negation.
    pub location: Array1<f64>,
    /// Order statistic count used for the tail estimate, if estimated.
    pub hill_k: Option<usize>,
}

impl HtPriorSpec {
    pub fn new(dof: f64, sigma_t: f64, location: Array1<f64>) -> Result<Self> {
        let tail = if dof.is_infinite() && dof > 0.0 {
            Tail::Gaussian
        } else if dof > 0.0 {
            Tail::StudentT { dof }
        } else {
            return Err(Error::config(format!("degrees of freedom must be positive, got {dof}")));
        };
        if !(sigma_t >= 0.0) || !sigma_t.is_finite() {
            return Err(Error::config("σ_T must be finite and ≥ 0"));
        }
        if location.is_empty() || location.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("prior location must be a finite non-empty vector"));
        }
        Ok(Self {
            tail,
            sigma_t,
            location,
            hill_k: None,
        })
    }

    /// Estimates `ν̂` and `μ̂` from clean training data.
    pub fn fit(dataset: &SampleBatch, sigma_t: f64, cfg: &HillConfig) -> Result<Self> {
        let nu = hill_estimate(dataset, cfg)?;
        let mut spec = Self::new(nu, sigma_t, estimate_location(dataset)?)?;
        spec.hill_k = Some(cfg.k);
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    /// `ν̂`, infinite for the Gaussian limit.
    pub fn dof(&self) -> f64 {
        match self.tail {
            Tail::StudentT { dof } => dof,
            Tail::Gaussian => f64::INFINITY,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleBatch> {
        let data = sample_t_mixture(self.location.view(), self.tail, self.sigma_t, n, rng)?;
        SampleBatch::new(data, Provenance::Prior, Some(self.sigma_t))
    }
}
