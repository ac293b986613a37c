//! Noise-level grids, per-step weights, and the two backward samplers.
//!
//! All dynamics are parameterized directly by the noise level σ (σ(t) = t),
//! so the forward marginal at level σ is `X_0 + σZ` and the probability-flow
//! ODE reads `dx/dσ = −σ·∇log p_σ(x)`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::ScoreModel;
use crate::targets::{Provenance, SampleBatch};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub steps: usize,
    pub rho: f64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        Self {
            sigma_max: 80.0,
            sigma_min: 0.002,
            steps: 18,
            rho: 7.0,
        }
    }
}

impl SigmaSchedule {
    pub fn new(sigma_max: f64, sigma_min: f64, steps: usize, rho: f64) -> Result<Self> {
        let s = Self {
            sigma_max,
            sigma_min,
            steps,
            rho,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) || !self.sigma_max.is_finite() {
            return Err(Error::config("σ_min must be positive and σ_max finite"));
        }
        if self.steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::config("ρ must be positive"));
        }
        if self.steps > 1 && !(self.sigma_max > self.sigma_min) {
            return Err(Error::config("σ_max must exceed σ_min"));
        }
        Ok(())
    }

    /// Karras power-law grid `σ_0 = σ_max > … > σ_{N−1} = σ_min`, followed by `σ_N = 0`.
    pub fn karras_sigmas(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.steps;
        if n == 1 {
            return Ok(vec![self.sigma_max, 0.0]);
        }
        let inv = 1.0 / self.rho;
        let hi = self.sigma_max.powf(inv);
        let lo = self.sigma_min.powf(inv);
        let mut sigmas: Vec<f64> = (0..n)
            .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(self.rho))
            .collect();
        // Pin the endpoints exactly; powf round trips can be off by an ulp.
        sigmas[0] = self.sigma_max;
        sigmas[n - 1] = self.sigma_min;
        sigmas.push(0.0);
        Ok(sigmas)
    }

    /// The grid used by the stochastic sampler: stops at σ_min.
    pub fn stochastic_sigmas(&self) -> Result<Vec<f64>> {
        let mut s = self.karras_sigmas()?;
        s.pop();
        Ok(s)
    }
}

/// `γ_k = σ_k² − σ_{k+1}²` for consecutive pairs of a strictly decreasing grid.
pub fn gamma_weights(sigmas: &[f64]) -> Result<Vec<f64>> {
    check_decreasing(sigmas)?;
    Ok(sigmas.windows(2).map(|w| w[0] * w[0] - w[1] * w[1]).collect())
}

fn check_decreasing(sigmas: &[f64]) -> Result<()> {
    if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::config("noise levels must be finite and non-negative"));
    }
    if let Some(i) = sigmas.windows(2).position(|w| !(w[0] > w[1])) {
        return Err(Error::config(format!(
            "noise grid is not strictly decreasing at index {i}: {} → {}",
            sigmas[i],
            sigmas[i + 1]
        )));
    }
    Ok(())
}

fn check_finite(x: &Array2<f64>, step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Sampler {
            step,
            message: "state became non-finite".into(),
        });
    }
    Ok(())
}

/// Deterministic second-order (Heun) integration of the probability-flow ODE
/// along `sigmas`. A step that lands on σ = 0 uses a single Euler evaluation.
pub fn heun_sample(
    model: &dyn ScoreModel,
    init: &SampleBatch,
    sigmas: &[f64],
) -> Result<SampleBatch> {
    check_decreasing(sigmas)?;
    let mut x = init.data.clone();
    for (k, w) in sigmas.windows(2).enumerate() {
        let (s, s_next) = (w[0], w[1]);
        let h = s_next - s;
        // dx/dσ = −σ·score
        let d1 = model.score(x.view(), s)? * (-s);
        let euler = &x + &(&d1 * h);
        if s_next > 0.0 {
            let d2 = model.score(euler.view(), s_next)? * (-s_next);
            x = &x + &((&d1 + &d2) * (0.5 * h));
        } else {
            x = euler;
        }
        check_finite(&x, k)?;
    }
    SampleBatch::new(x, Provenance::Generated, sigmas.last().copied())
}

/// Euler–Maruyama on the backward SDE:
/// `x ← x + γ_k·score(x, σ_k) + √γ_k·z` for every consecutive pair with
/// `σ_{k+1} > 0`, so the trajectory stops at the last positive level.
pub fn em_sample<R: Rng + ?Sized>(
    model: &dyn ScoreModel,
    init: &SampleBatch,
    sigmas: &[f64],
    rng: &mut R,
) -> Result<SampleBatch> {
    check_decreasing(sigmas)?;
    let mut x = init.data.clone();
    let mut last = sigmas.first().copied();
    for (k, w) in sigmas.windows(2).enumerate() {
        let (s, s_next) = (w[0], w[1]);
        if s_next <= 0.0 {
            break;
        }
        let gamma = s * s - s_next * s_next;
        let score = model.score(x.view(), s)?;
        let root = gamma.sqrt();
        ndarray::Zip::from(&mut x).and(&score).for_each(|xi, &si| {
            let z: f64 = StandardNormal.sample(rng);
            *xi += gamma * si + root * z;
        });
        check_finite(&x, k)?;
        last = Some(s_next);
    }
    SampleBatch::new(x, Provenance::Generated, last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::score::{GaussianScore, PointMassScore, ZeroScore};
    use crate::targets::{column_moments, covariance};
    use ndarray::array;

    fn gaussian_init(n: usize, d: usize, sd: f64, seed: u64) -> SampleBatch {
        let mut r = rng::from_seed(seed);
        let data = Array2::from_shape_fn((n, d), |_| {
            let z: f64 = StandardNormal.sample(&mut r);
            sd * z
        });
        SampleBatch::new(data, Provenance::Prior, None).unwrap()
    }

    #[test]
    fn karras_grid_endpoints_and_shape() {
        let sched = SigmaSchedule::new(80.0, 0.002, 10, 7.0).unwrap();
        let s = sched.karras_sigmas().unwrap();
        assert_eq!(s.len(), 11);
        assert_eq!(s[0], 80.0);
        assert_eq!(s[9], 0.002);
        assert_eq!(s[10], 0.0);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        // Steps shrink in log space: log-ratios increase then stay convex.
        let logs: Vec<f64> = s[..10].iter().map(|v| v.ln()).collect();
        let gaps: Vec<f64> = logs.windows(2).map(|w| w[0] - w[1]).collect();
        assert!(gaps.windows(2).all(|g| g[1] > g[0]), "{gaps:?}");
        assert_eq!(
            SigmaSchedule::new(5.0, 0.002, 1, 7.0).unwrap().karras_sigmas().unwrap(),
            vec![5.0, 0.0]
        );
        assert!(SigmaSchedule::new(5.0, 0.0, 4, 7.0).is_err());
        assert!(SigmaSchedule::new(5.0, 0.1, 0, 7.0).is_err());
    }

    #[test]
    fn gamma_weights_difference_of_squares() {
        assert_eq!(gamma_weights(&[2.0, 1.0, 0.0]).unwrap(), vec![3.0, 1.0]);
        assert!(gamma_weights(&[2.0, 1.0, 1.0]).is_err());
        assert!(gamma_weights(&[1.0, 2.0]).is_err());
        let s = SigmaSchedule::new(7.0, 0.002, 25, 7.0).unwrap().karras_sigmas().unwrap();
        let g = gamma_weights(&s).unwrap();
        assert!(g.iter().all(|&v| v > 0.0));
        assert!((g.iter().sum::<f64>() - 49.0).abs() < 1e-12);
    }

    #[test]
    fn euler_to_zero_collapses_point_mass() {
        let init = SampleBatch::new(array![[3.0, -1.5], [0.2, 9.0]], Provenance::Prior, None).unwrap();
        let out = heun_sample(&PointMassScore, &init, &[2.5, 0.0]).unwrap();
        assert!(out.data.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn single_level_grid_is_identity() {
        let init = gaussian_init(5, 2, 1.0, 0);
        assert_eq!(heun_sample(&ZeroScore, &init, &[1.0]).unwrap().data, init.data);
        let mut r = rng::from_seed(0);
        assert_eq!(em_sample(&ZeroScore, &init, &[1.0], &mut r).unwrap().data, init.data);
    }

    #[test]
    fn heun_recovers_gaussian_target() {
        let s2 = 1.5f64;
        let sched = SigmaSchedule::new(80.0, 0.002, 40, 7.0).unwrap();
        let sigmas = sched.karras_sigmas().unwrap();
        let init = gaussian_init(100_000, 3, (s2 + 80.0f64 * 80.0).sqrt(), 1);
        let out = heun_sample(&GaussianScore { variance: s2 }, &init, &sigmas).unwrap();
        let cov = covariance(out.view());
        let target = Array2::<f64>::eye(3) * s2;
        let rel = (&cov - &target).mapv(|v| v * v).sum().sqrt() / target.mapv(|v| v * v).sum().sqrt();
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn em_recovers_noised_gaussian_target() {
        let s2 = 1.0f64;
        let sched = SigmaSchedule::new(5.0, 0.002, 200, 7.0).unwrap();
        let sigmas = sched.stochastic_sigmas().unwrap();
        let init = gaussian_init(100_000, 2, (s2 + 25.0f64).sqrt(), 2);
        let out = em_sample(&GaussianScore { variance: s2 }, &init, &sigmas, &mut rng::from_seed(3)).unwrap();
        assert_eq!(out.sigma, Some(0.002));
        let (_, var) = column_moments(out.view());
        let target = s2 + 0.002f64.powi(2);
        assert!(var.iter().all(|v| ((v - target) / target).abs() < 0.05), "{var}");
    }

    #[test]
    fn em_with_zero_score_is_pure_diffusion() {
        let sigmas = SigmaSchedule::new(3.0, 0.5, 30, 7.0).unwrap().stochastic_sigmas().unwrap();
        let init = SampleBatch::new(Array2::zeros((100_000, 2)), Provenance::Prior, None).unwrap();
        let out = em_sample(&ZeroScore, &init, &sigmas, &mut rng::from_seed(4)).unwrap();
        let (_, var) = column_moments(out.view());
        let expected = 9.0 - 0.25;
        assert!(var.iter().all(|v| ((v - expected) / expected).abs() < 0.03), "{var}");
    }

    #[test]
    fn non_finite_state_reports_step() {
        struct Exploding;
        impl ScoreModel for Exploding {
            fn kind(&self) -> &'static str {
                "exploding"
            }
            fn score(&self, x: ndarray::ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
                Ok(x.mapv(|_| if sigma < 1.0 { f64::INFINITY } else { 0.0 }))
            }
        }
        let init = gaussian_init(4, 2, 1.0, 0);
        let err = heun_sample(&Exploding, &init, &[4.0, 2.0, 0.5, 0.1]).unwrap_err();
        assert!(matches!(err, Error::Sampler { step: 1, .. }), "{err}");
    }
}
