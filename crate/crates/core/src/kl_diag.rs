//! Monte-Carlo estimators for the terms of the KL error decomposition:
//! initialization KL, score training error and the Fisher-information
//! discretization bound.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{gamma_weights, SigmaSchedule};
use crate::score::{LogDensity, ScoreModel};
use crate::targets::{forward_noise, GmmSpec, NoisedGmm, SampleBatch};

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::Estimation("need at least two Monte-Carlo draws".into()));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Ok(Self {
            value: mean,
            std_err: (var / n as f64).sqrt(),
            n,
        })
    }

    /// True when `self − other` exceeds `k` combined standard errors.
    pub fn exceeds(&self, other: &Estimate, k: f64) -> bool {
        let se = (self.std_err.powi(2) + other.std_err.powi(2)).sqrt();
        self.value - other.value > k * se
    }
}

/// `KL(p‖q) ≈ mean(log p − log q)` over draws from `p`.
pub fn mc_kl(p: &dyn LogDensity, q: &dyn LogDensity, samples_from_p: &SampleBatch) -> Result<Estimate> {
    let lp = p.log_density(samples_from_p.view())?;
    let lq = q.log_density(samples_from_p.view())?;
    if lq.iter().any(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::Estimation(
            "q assigns zero density to a draw from p; the divergence is infinite".into(),
        ));
    }
    let diffs: Vec<f64> = lp.iter().zip(lq.iter()).map(|(a, b)| a - b).collect();
    if diffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Estimation("non-finite log-density ratio".into()));
    }
    Estimate::from_values(&diffs)
}

/// `I(p_σ) ≈ mean ‖score(x, σ)‖²` over draws `x ~ p_σ`.
pub fn mc_fisher(score: &dyn ScoreModel, sigma: f64, samples: &SampleBatch) -> Result<Estimate> {
    let s = score.score(samples.view(), sigma)?;
    let norms: Vec<f64> = s.axis_iter(Axis(0)).map(|r| r.dot(&r)).collect();
    Estimate::from_values(&norms)
}

/// `max_k γ_k · (I_δ − I_T)` over a grid ending at `σ_min` (a trailing zero is
/// ignored).
pub fn disc_bound_term(sigmas: &[f64], i_delta: f64, i_t: f64) -> Result<f64> {
    let grid = match sigmas.split_last() {
        Some((&0.0, rest)) => rest,
        _ => sigmas,
    };
    if grid.len() < 2 {
        return Err(Error::config("discretization bound needs at least one step"));
    }
    let max_gamma = gamma_weights(grid)?.into_iter().fold(0.0, f64::max);
    Ok(max_gamma * (i_delta - i_t))
}

/// `Σ_k γ_k · mean ‖truth(x, σ_k) − model(x, σ_k)‖²` with `x` drawn fresh from
/// the forward marginal at each `σ_k` of a grid ending at `σ_min`.
pub fn train_error_term<R: Rng + ?Sized>(
    model: &dyn ScoreModel,
    truth: &dyn ScoreModel,
    clean: &SampleBatch,
    sigmas: &[f64],
    rng: &mut R,
) -> Result<f64> {
    let grid = match sigmas.split_last() {
        Some((&0.0, rest)) => rest,
        _ => sigmas,
    };
    let gammas = gamma_weights(grid)?;
    let mut total = 0.0;
    for (&sigma, &gamma) in grid.iter().zip(&gammas) {
        let x = forward_noise(clean, sigma, rng)?;
        let diff = truth.score(x.view(), sigma)? - model.score(x.view(), sigma)?;
        let mse = diff.mapv(|v| v * v).sum() / x.len() as f64;
        total += gamma * mse;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub sigma_t: f64,
    pub e_init: Estimate,
    pub e_train: Option<f64>,
    pub e_disc: f64,
    pub fisher_delta: Estimate,
    pub fisher_t: Estimate,
    pub max_gamma: f64,
    /// Set when MC noise made `I_δ < I_T`.
    pub negative_gap: bool,
}

/// Evaluates the computable bound terms for a mixture target and an
/// initialization density `prior` on the schedule's stochastic grid.
pub fn diagnose_bound<R: Rng + ?Sized>(
    gmm: &GmmSpec,
    prior: &dyn LogDensity,
    model: Option<&dyn ScoreModel>,
    schedule: &SigmaSchedule,
    n: usize,
    rng: &mut R,
) -> Result<BoundReport> {
    let sigmas = schedule.stochastic_sigmas()?;
    let sigma_t = schedule.sigma_max;
    let sigma_min = schedule.sigma_min;
    let clean = gmm.sample(n, rng)?;
    let at_t = forward_noise(&clean, sigma_t, rng)?;
    let e_init = mc_kl(&NoisedGmm { spec: gmm, sigma: sigma_t }, prior, &at_t)?;
    let fisher_t = mc_fisher(gmm, sigma_t, &at_t)?;
    let at_delta = forward_noise(&clean, sigma_min, rng)?;
    let fisher_delta = mc_fisher(gmm, sigma_min, &at_delta)?;
    let max_gamma = gamma_weights(&sigmas)?.into_iter().fold(0.0, f64::max);
    let e_disc = disc_bound_term(&sigmas, fisher_delta.value, fisher_t.value)?;
    let e_train = match model {
        Some(m) => Some(train_error_term(m, gmm, &clean, &sigmas, rng)?),
        None => None,
    };
    Ok(BoundReport {
        sigma_t,
        e_init,
        e_train,
        e_disc,
        fisher_delta,
        fisher_t,
        max_gamma,
        negative_gap: fisher_delta.value < fisher_t.value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::score::{GaussianScore, IsoGaussian};
    use crate::targets::{make_random_gmm, Provenance};
    use ndarray::{Array2, ArrayView2};

    struct Offset<'a> {
        inner: &'a GmmSpec,
        c: f64,
    }

    impl ScoreModel for Offset<'_> {
        fn kind(&self) -> &'static str {
            "offset"
        }
        fn score(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
            Ok(self.inner.noised_score(x, sigma)? + self.c)
        }
    }

    #[test]
    fn identical_densities_give_zero_kl() {
        let mut r = rng::from_seed(0);
        let x = crate::targets::HtSpec::gaussian_limit(3).sample(1000, &mut r).unwrap();
        let p = IsoGaussian { sigma: 1.5 };
        let kl = mc_kl(&p, &p, &x).unwrap();
        assert_eq!((kl.value, kl.std_err), (0.0, 0.0));
    }

    #[test]
    fn zero_density_is_flagged() {
        struct Empty;
        impl LogDensity for Empty {
            fn log_density(&self, x: ArrayView2<f64>) -> Result<ndarray::Array1<f64>> {
                Ok(ndarray::Array1::from_elem(x.nrows(), f64::NEG_INFINITY))
            }
        }
        let x = SampleBatch::new(Array2::zeros((4, 2)), Provenance::Target, None).unwrap();
        assert!(matches!(
            mc_kl(&IsoGaussian { sigma: 1.0 }, &Empty, &x),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn disc_term_arithmetic() {
        assert_eq!(disc_bound_term(&[2.0, 1.0], 7.0, 2.0).unwrap(), 15.0);
        assert_eq!(disc_bound_term(&[2.0, 1.0, 0.0], 7.0, 2.0).unwrap(), 15.0);
        assert_eq!(disc_bound_term(&[2.0, 1.0], 4.0, 4.0).unwrap(), 0.0);
        assert!(disc_bound_term(&[1.0, 2.0], 4.0, 1.0).is_err());
    }

    #[test]
    fn refining_the_grid_shrinks_the_disc_term() {
        let mut last = f64::INFINITY;
        for n in [10, 20, 40] {
            let s = SigmaSchedule::new(7.0, 0.002, n, 7.0).unwrap().stochastic_sigmas().unwrap();
            let term = disc_bound_term(&s, 10.0, 1.0).unwrap();
            assert!(term < last);
            last = term;
        }
    }

    #[test]
    fn train_error_of_exact_and_offset_scores() {
        let gmm = make_random_gmm(3, 4).unwrap();
        let mut r = rng::from_seed(1);
        let clean = gmm.sample(500, &mut r).unwrap();
        let sigmas = SigmaSchedule::new(2.0, 0.01, 8, 7.0).unwrap().stochastic_sigmas().unwrap();
        assert_eq!(train_error_term(&gmm, &gmm, &clean, &sigmas, &mut r).unwrap(), 0.0);
        let c = 0.3;
        let offset = Offset { inner: &gmm, c };
        let got = train_error_term(&offset, &gmm, &clean, &sigmas, &mut r).unwrap();
        let expected = 3.0 * c * c * (2.0f64.powi(2) - 0.01f64.powi(2));
        assert!((got - expected).abs() < 1e-10 * expected, "{got} vs {expected}");
    }

    #[test]
    fn gaussian_fisher_is_dimension_over_variance() {
        let mut r = rng::from_seed(2);
        let x = forward_noise(
            &SampleBatch::new(Array2::zeros((100_000, 3)), Provenance::Target, None).unwrap(),
            2.0,
            &mut r,
        )
        .unwrap();
        let est = mc_fisher(&GaussianScore { variance: 0.0 }, 2.0, &x).unwrap();
        assert!((est.value - 0.75).abs() < 3.0 * est.std_err, "{est:?}");
    }
}
