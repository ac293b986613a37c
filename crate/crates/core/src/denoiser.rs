//! MLP denoiser with EDM preconditioning, trained by denoising score matching.
//!
//! `D(x, σ) = c_skip(σ)·x + c_out(σ)·F(c_in(σ)·x, emb(c_noise(σ)))` and the
//! implied score is `(D − x)/σ²`.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{median, push_row, Activation, Adam, AdamConfig, Mlp, MlpGrads, TextRecord, TrainLog};
use crate::rng;
use crate::score::ScoreModel;
use crate::targets::SampleBatch;

/// Number of sinusoidal frequencies in the noise embedding (sin and cos each).
pub const EMBED_FREQUENCIES: usize = 16;

/// The four EDM preconditioning coefficients at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Preconditioning {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma;
        let d2 = sigma_data * sigma_data;
        let root = (s2 + d2).sqrt();
        Self {
            c_skip: d2 / (s2 + d2),
            c_out: sigma * sigma_data / root,
            c_in: 1.0 / root,
            c_noise: 0.25 * sigma.ln(),
        }
    }
}

/// Geometric frequencies from 0.5 to 16.
fn embedding_frequencies() -> Vec<f64> {
    let n = EMBED_FREQUENCIES;
    (0..n)
        .map(|j| 0.5 * 32f64.powf(j as f64 / (n - 1) as f64))
        .collect()
}

fn write_embedding(c_noise: f64, freqs: &[f64], out: &mut [f64]) {
    let n = freqs.len();
    for (j, f) in freqs.iter().enumerate() {
        let (sin, cos) = (f * c_noise).sin_cos();
        out[j] = sin;
        out[n + j] = cos;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    trunk: Mlp,
    sigma_data: f64,
    dim: usize,
    frequencies: Vec<f64>,
}

impl DenoiserNet {
    pub fn new(trunk: Mlp, dim: usize, sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0) || !sigma_data.is_finite() {
            return Err(Error::config("σ_data must be positive"));
        }
        let frequencies = embedding_frequencies();
        if trunk.input_width() != dim + 2 * frequencies.len() || trunk.output_width() != dim {
            return Err(Error::config(format!(
                "trunk maps {} → {} but a {dim}-dimensional denoiser needs {} → {dim}",
                trunk.input_width(),
                trunk.output_width(),
                dim + 2 * frequencies.len()
            )));
        }
        Ok(Self {
            trunk,
            sigma_data,
            dim,
            frequencies,
        })
    }

    /// Randomly initialized trunk with `hidden_layers` SiLU layers of `width`.
    pub fn init<R: rand::Rng + ?Sized>(
        dim: usize,
        sigma_data: f64,
        width: usize,
        hidden_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![dim + 2 * EMBED_FREQUENCIES];
        sizes.extend(std::iter::repeat_n(width, hidden_layers));
        sizes.push(dim);
        let trunk = Mlp::new(&sizes, Activation::Silu, Activation::Identity, rng)?;
        Self::new(trunk, dim, sigma_data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut Mlp {
        &mut self.trunk
    }

    /// Trunk input rows `[c_in·x, emb(c_noise)]` for per-row noise levels.
    fn trunk_input(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Array2<f64> {
        let d = self.dim;
        let mut input = Array2::zeros((x.nrows(), self.trunk.input_width()));
        for ((mut row, xr), &sigma) in input.rows_mut().into_iter().zip(x.rows()).zip(sigmas) {
            let p = Preconditioning::new(sigma, self.sigma_data);
            let slice = row.as_slice_mut().expect("standard layout");
            for (o, v) in slice[..d].iter_mut().zip(xr.iter()) {
                *o = p.c_in * v;
            }
            write_embedding(p.c_noise, &self.frequencies, &mut slice[d..]);
        }
        input
    }

    /// `D(x, σ)` for a batch at a single noise level.
    pub fn forward(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        if !(sigma > 0.0) {
            return Err(Error::config(format!("denoiser needs σ > 0, got {sigma}")));
        }
        if x.ncols() != self.dim {
            return Err(Error::config(format!(
                "input dimension {} does not match denoiser dimension {}",
                x.ncols(),
                self.dim
            )));
        }
        let p = Preconditioning::new(sigma, self.sigma_data);
        let input = self.trunk_input(x, &vec![sigma; x.nrows()]);
        let mut out = self.trunk.infer(input.view())?;
        out *= p.c_out;
        out.scaled_add(p.c_skip, &x);
        Ok(out)
    }

    /// `(D(x, σ) − x)/σ²`.
    pub fn score(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        let denoised = self.forward(x, sigma)?;
        Ok(score_from_denoised(denoised.view(), x, sigma))
    }

    /// Mean EDM-weighted loss over the rows of `(clean, noisy, sigmas)` and its
    /// gradient with respect to the trunk parameters.
    ///
    /// Since `λ(σ)·c_out² = 1`, the weighted loss equals `‖F − (x − c_skip·y)/c_out‖²`.
    pub fn loss_and_grad(
        &self,
        clean: ArrayView2<f64>,
        noisy: ArrayView2<f64>,
        sigmas: &[f64],
    ) -> Result<(f64, MlpGrads)> {
        let (b, d) = clean.dim();
        if noisy.dim() != (b, d) || sigmas.len() != b || d != self.dim {
            return Err(Error::config("denoising batch shapes are inconsistent"));
        }
        let mut target = Array2::zeros((b, d));
        for (((mut t, c), y), &s) in target
            .rows_mut()
            .into_iter()
            .zip(clean.rows())
            .zip(noisy.rows())
            .zip(sigmas)
        {
            let p = Preconditioning::new(s, self.sigma_data);
            for ((ti, ci), yi) in t.iter_mut().zip(c.iter()).zip(y.iter()) {
                *ti = (ci - p.c_skip * yi) / p.c_out;
            }
        }
        let input = self.trunk_input(noisy, sigmas);
        let (out, cache) = self.trunk.forward(input.view())?;
        let residual = out - &target;
        let loss = residual.mapv(|v| v * v).sum() / b as f64;
        let upstream = residual * (2.0 / b as f64);
        let (_, grads) = self.trunk.backward(&cache, upstream.view())?;
        Ok((loss, grads))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "denoiser v1");
        let _ = writeln!(out, "dim {}", self.dim);
        let _ = writeln!(out, "sigma_data {}", self.sigma_data);
        let _ = writeln!(out, "frequencies {}", self.frequencies.len());
        push_row(&mut out, ndarray::ArrayView1::from(&self.frequencies));
        self.trunk.write_text(&mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rec = TextRecord::new(text);
        rec.expect_fields("denoiser", 2)?;
        let dim: usize = rec.keyed("dim")?;
        let sigma_data: f64 = rec.keyed("sigma_data")?;
        let n: usize = rec.keyed("frequencies")?;
        let frequencies = rec.floats(n)?;
        let trunk = Mlp::read_text(&mut rec)?;
        let mut net = Self::new(trunk, dim, sigma_data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        net.frequencies = frequencies;
        Ok(net)
    }
}

/// Score implied by a denoised estimate: `(D − x)/σ²`.
pub fn score_from_denoised(denoised: ArrayView2<f64>, x: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    (&denoised - &x) / (sigma * sigma)
}

impl ScoreModel for DenoiserNet {
    fn kind(&self) -> &'static str {
        "mlp-denoiser"
    }

    fn score(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        DenoiserNet::score(self, x, sigma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Mean of log σ; defaults to the log-midpoint of the σ range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_mean: Option<f64>,
    /// Std of log σ; defaults to a quarter of the log-range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_std: Option<f64>,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub seed: u64,
}

impl Default for DenoiseTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 2000,
            epochs: 100,
            sigma_min: 0.002,
            sigma_max: 2.0,
            p_mean: None,
            p_std: None,
            hidden_width: 128,
            hidden_layers: 4,
            seed: 0,
        }
    }
}

impl DenoiseTrainConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if !(self.sigma_min > 0.0) || !(self.sigma_max > self.sigma_min) {
            return Err(Error::config("denoiser σ range must satisfy 0 < σ_min < σ_max"));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::config(format!(
                "batch size {} must lie in 1..={n}",
                self.batch_size
            )));
        }
        if self.epochs == 0 || self.hidden_width == 0 {
            return Err(Error::config("epochs and width must be positive"));
        }
        Ok(())
    }

    /// `(P_mean, P_std)` of the log-normal noise-level distribution.
    pub fn log_normal(&self) -> (f64, f64) {
        let (lo, hi) = (self.sigma_min.ln(), self.sigma_max.ln());
        (
            self.p_mean.unwrap_or(0.5 * (lo + hi)),
            self.p_std.unwrap_or(0.25 * (hi - lo)),
        )
    }
}

/// Pooled per-coordinate standard deviation.
fn data_scale(x: ArrayView2<f64>) -> f64 {
    x.var_axis(Axis(0), 0.0).mean().unwrap_or(1.0).sqrt()
}

/// Trains a denoiser on clean draws with the EDM-weighted loss
/// `E[λ(σ)‖D(x + σz, σ) − x‖²]`, `λ(σ) = (σ² + σ_data²)/(σ·σ_data)²`.
pub fn train_denoiser(
    dataset: &SampleBatch,
    config: &DenoiseTrainConfig,
) -> Result<(DenoiserNet, TrainLog)> {
    train_denoiser_with(dataset, config, |_, _| Ok(()))
}

/// As [`train_denoiser`], calling `on_epoch(epoch, &net)` after each epoch.
pub fn train_denoiser_with(
    dataset: &SampleBatch,
    config: &DenoiseTrainConfig,
    mut on_epoch: impl FnMut(usize, &DenoiserNet) -> Result<()>,
) -> Result<(DenoiserNet, TrainLog)> {
    let x = dataset.view();
    let (n, d) = x.dim();
    config.validate(n)?;
    let sigma_data = data_scale(x);
    let mut rng = rng::stream(config.seed, "denoiser-train");
    let mut net = DenoiserNet::init(d, sigma_data, config.hidden_width, config.hidden_layers, &mut rng)?;
    let mut params = Vec::with_capacity(net.trunk.param_count());
    net.trunk.write_params(&mut params);
    let mut adam = Adam::new(params.len(), AdamConfig::with_lr(config.lr))?;
    let (p_mean, p_std) = config.log_normal();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut grads_flat = Vec::with_capacity(params.len());

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for idx in order.chunks(config.batch_size) {
            let b = idx.len();
            let mut clean = Array2::zeros((b, d));
            for (mut row, &i) in clean.rows_mut().into_iter().zip(idx) {
                row.assign(&x.row(i));
            }
            let sigmas: Vec<f64> = (0..b)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    (p_mean + p_std * g).exp().clamp(config.sigma_min, config.sigma_max)
                })
                .collect();
            let mut noisy = clean.clone();
            for (mut row, &s) in noisy.rows_mut().into_iter().zip(&sigmas) {
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += s * z;
                }
            }
            let (loss, grads) = net.loss_and_grad(clean.view(), noisy.view(), &sigmas)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "denoiser loss became non-finite in epoch {epoch}"
                )));
            }
            batch_losses.push(loss);
            grads_flat.clear();
            grads.write_flat(&mut grads_flat);
            adam.step(&mut params, &grads_flat)?;
            net.trunk.read_params(&params)?;
        }
        log.epoch_losses.push(median(&mut batch_losses));
        on_epoch(epoch, &net)?;
    }
    Ok((net, log))
}

/// Mean EDM-weighted denoising loss of `net` on `dataset` at fixed `sigma`.
pub fn denoising_loss(
    net: &DenoiserNet,
    dataset: &SampleBatch,
    sigma: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, "denoiser-eval");
    let x = dataset.view();
    let noisy = x.mapv(|v| {
        let z: f64 = StandardNormal.sample(&mut rng);
        v + sigma * z
    });
    let denoised = net.forward(noisy.view(), sigma)?;
    let sd = net.sigma_data;
    let weight = (sigma * sigma + sd * sd) / (sigma * sd).powi(2);
    let err = (&denoised - &x).mapv(|v| v * v).sum_axis(Axis(1));
    Ok(weight * err.mean().unwrap_or(f64::NAN))
}
