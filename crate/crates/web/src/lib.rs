//! WebAssembly bindings for the browser demo in `www/`.

use wasm_bindgen::prelude::*;

use shorthorizon::ht_prior::hill_1d;
use shorthorizon::metrics::{sliced_wasserstein, Order};
use shorthorizon::rng;
use shorthorizon::schedule::{self, heun_sample, SigmaSchedule};
use shorthorizon::targets::{forward_noise, make_random_gmm, HtSpec, Provenance, SampleBatch};

fn js(e: shorthorizon::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn flat(batch: &SampleBatch) -> Vec<f64> {
    batch.data.iter().copied().collect()
}

/// Noise levels of the Karras grid, ending with 0.
#[wasm_bindgen]
pub fn karras_sigmas(sigma_max: f64, sigma_min: f64, steps: u32, rho: f64) -> Result<Vec<f64>, JsError> {
    SigmaSchedule::new(sigma_max, sigma_min, steps as usize, rho)
        .and_then(|s| s.karras_sigmas())
        .map_err(js)
}

/// `γ_k = σ_k² − σ_{k+1}²` of a decreasing grid.
#[wasm_bindgen]
pub fn gamma_weights(sigmas: Vec<f64>) -> Result<Vec<f64>, JsError> {
    schedule::gamma_weights(&sigmas).map_err(js)
}

/// Result of one 2D generation run.
#[wasm_bindgen]
pub struct Generation {
    target: Vec<f64>,
    initial: Vec<f64>,
    generated: Vec<f64>,
    swd: f64,
}

#[wasm_bindgen]
impl Generation {
    /// Clean target draws, flattened as x0, y0, x1, y1, …
    pub fn target(&self) -> Vec<f64> {
        self.target.clone()
    }

    pub fn initial(&self) -> Vec<f64> {
        self.initial.clone()
    }

    pub fn generated(&self) -> Vec<f64> {
        self.generated.clone()
    }

    /// Sliced Wasserstein distance between generated and target points.
    pub fn swd(&self) -> f64 {
        self.swd
    }
}

pub fn run_generation(seed: u64, sigma_t: f64, steps: usize, exact_init: bool, n: usize) -> shorthorizon::Result<Generation> {
    let gmm = make_random_gmm(2, seed)?;
    let mut r = rng::stream(seed, "web-demo");
    let target = gmm.sample(n, &mut r)?;
    let initial = if exact_init {
        let fresh = gmm.sample(n, &mut r)?;
        forward_noise(&fresh, sigma_t, &mut r)?
    } else {
        let zeros = SampleBatch::new(ndarray::Array2::zeros((n, 2)), Provenance::Prior, None)?;
        forward_noise(&zeros, sigma_t, &mut r)?
    };
    let sigmas = SigmaSchedule::new(sigma_t, 0.002, steps, 7.0)?.karras_sigmas()?;
    let generated = heun_sample(&gmm, &initial, &sigmas)?;
    let swd = sliced_wasserstein(generated.view(), target.view(), 200, Order::Two, &mut r)?;
    Ok(Generation {
        target: flat(&target),
        initial: flat(&initial),
        generated: flat(&generated),
        swd,
    })
}

/// Heun sampling of a random 2D mixture from `N(0, σ_T² I)` or from the exact
/// noised marginal.
#[wasm_bindgen]
pub fn generate(seed: u32, sigma_t: f64, steps: u32, exact_init: bool, n: u32) -> Result<Generation, JsError> {
    run_generation(seed as u64, sigma_t, steps as usize, exact_init, n as usize).map_err(js)
}

pub fn hill_curve_values(dof: f64, n: usize, seed: u64, ks: &[usize]) -> shorthorizon::Result<Vec<f64>> {
    let sample = HtSpec::new(1, dof)?.sample(n, &mut rng::stream(seed, "web-hill"))?;
    let col = sample.data.column(0);
    ks.iter().map(|&k| hill_1d(col, k, true)).collect()
}

/// Hill estimates `ν̂(k)` for a one-dimensional heavy-tailed sample.
#[wasm_bindgen]
pub fn hill_curve(dof: f64, n: u32, seed: u32, ks: Vec<u32>) -> Result<Vec<f64>, JsError> {
    let ks: Vec<usize> = ks.into_iter().map(|k| k as usize).collect();
    hill_curve_values(dof, n as usize, seed as u64, &ks).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_init_beats_gaussian_init_at_short_horizon() {
        let exact = run_generation(3, 2.0, 10, true, 2000).unwrap();
        let gauss = run_generation(3, 2.0, 10, false, 2000).unwrap();
        assert_eq!(exact.generated.len(), 4000);
        assert!(exact.swd < gauss.swd, "{} vs {}", exact.swd, gauss.swd);
    }

    #[test]
    fn hill_curve_tracks_dof() {
        let v = hill_curve_values(3.0, 50_000, 1, &[100, 300]).unwrap();
        assert!(v.iter().all(|x| (2.0..4.5).contains(x)), "{v:?}");
    }
}
