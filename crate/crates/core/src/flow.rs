//! Affine-coupling normalizing flow used as the learned initialization.
//!
//! The forward map sends base draws `z ~ N(0, I)` to data scale; a training
//! factor `c` multiplies the output so the couplings see `x / c`.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{median, Activation, Adam, AdamConfig, Mlp, MlpCache, TextRecord, TrainLog};
use crate::rng;
use crate::score::LogDensity;
use crate::targets::{forward_noise, Provenance, SampleBatch};

/// Log-scales are `SCALE_CLAMP · tanh(raw)`.
pub const SCALE_CLAMP: f64 = 2.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    /// Conditions on even coordinates, transforms odd ones.
    Even,
    /// Conditions on odd coordinates, transforms even ones.
    Odd,
}

impl Parity {
    fn split(self, dim: usize) -> (Vec<usize>, Vec<usize>) {
        let keep = match self {
            Parity::Even => 0,
            Parity::Odd => 1,
        };
        (0..dim).partition(|i| i % 2 == keep)
    }

    fn name(self) -> &'static str {
        match self {
            Parity::Even => "even",
            Parity::Odd => "odd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Base → data.
    Forward,
    /// Data → base.
    Inverse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    parity: Parity,
    cond: Vec<usize>,
    trans: Vec<usize>,
    scale_net: Mlp,
    shift_net: Mlp,
}

struct LayerCache {
    scale_cache: MlpCache,
    shift_cache: MlpCache,
    log_scale: Array2<f64>,
    output_trans: Array2<f64>,
}

fn gather(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(1), idx)
}

fn scatter(into: &mut Array2<f64>, idx: &[usize], values: &Array2<f64>) {
    for (k, &j) in idx.iter().enumerate() {
        into.column_mut(j).assign(&values.column(k));
    }
}

impl CouplingLayer {
    pub fn new(dim: usize, parity: Parity, scale_net: Mlp, shift_net: Mlp) -> Result<Self> {
        let (cond, trans) = parity.split(dim);
        if cond.is_empty() || trans.is_empty() {
            return Err(Error::config("coupling layers need dimension ≥ 2"));
        }
        for net in [&scale_net, &shift_net] {
            if net.input_width() != cond.len() || net.output_width() != trans.len() {
                return Err(Error::config(format!(
                    "coupling net maps {} → {} but the mask needs {} → {}",
                    net.input_width(),
                    net.output_width(),
                    cond.len(),
                    trans.len()
                )));
            }
        }
        Ok(Self {
            parity,
            cond,
            trans,
            scale_net,
            shift_net,
        })
    }

    /// Coupling nets with `hidden_layers` SiLU layers of `width` and a zeroed
    /// output layer, so the layer starts as the identity.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        parity: Parity,
        width: usize,
        hidden_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (cond, trans) = parity.split(dim);
        let mut sizes = vec![cond.len()];
        sizes.extend(std::iter::repeat_n(width, hidden_layers));
        sizes.push(trans.len());
        let mut scale_net = Mlp::new(&sizes, Activation::Silu, Activation::Identity, rng)?;
        let mut shift_net = Mlp::new(&sizes, Activation::Silu, Activation::Identity, rng)?;
        scale_net.zero_output_layer();
        shift_net.zero_output_layer();
        Self::new(dim, parity, scale_net, shift_net)
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn scale_net_mut(&mut self) -> &mut Mlp {
        &mut self.scale_net
    }

    pub fn shift_net(&self) -> &Mlp {
        &self.shift_net
    }

    pub fn shift_net_mut(&mut self) -> &mut Mlp {
        &mut self.shift_net
    }

    /// Coordinates this layer rewrites.
    pub fn transformed(&self) -> &[usize] {
        &self.trans
    }

    fn log_scale(&self, cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        let raw = self.scale_net.infer(cond)?;
        Ok(raw.mapv(|r| SCALE_CLAMP * r.tanh()))
    }

    /// Applies the layer in `direction`, adding its log|det J| to `logdet`.
    fn apply(&self, x: &mut Array2<f64>, direction: Direction, logdet: &mut Array1<f64>) -> Result<()> {
        let cond = gather(x.view(), &self.cond);
        let s = self.log_scale(cond.view())?;
        let t = self.shift_net.infer(cond.view())?;
        if s.iter().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Model("coupling net produced non-finite output".into()));
        }
        let b = gather(x.view(), &self.trans);
        let out = match direction {
            Direction::Forward => {
                *logdet += &s.sum_axis(Axis(1));
                b * s.mapv(f64::exp) + &t
            }
            Direction::Inverse => {
                *logdet -= &s.sum_axis(Axis(1));
                (b - &t) * s.mapv(|v| (-v).exp())
            }
        };
        scatter(x, &self.trans, &out);
        Ok(())
    }

    /// Inverse application recording everything needed for backprop.
    fn inverse_cached(&self, y: &mut Array2<f64>) -> Result<LayerCache> {
        let cond = gather(y.view(), &self.cond);
        let (raw, scale_cache) = self.scale_net.forward(cond.view())?;
        let (t, shift_cache) = self.shift_net.forward(cond.view())?;
        let log_scale = raw.mapv(|r| SCALE_CLAMP * r.tanh());
        let b = gather(y.view(), &self.trans);
        let output_trans = (b - &t) * log_scale.mapv(|v| (-v).exp());
        scatter(y, &self.trans, &output_trans);
        Ok(LayerCache {
            scale_cache,
            shift_cache,
            log_scale,
            output_trans,
        })
    }
}

/// Stack of alternating couplings over `N(0, I_d)`, scaled by `training_factor`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    dim: usize,
    layers: Vec<CouplingLayer>,
    training_factor: f64,
    sigma_t: f64,
}

/// Output of [`FlowModel::transform`].
#[derive(Clone, Debug)]
pub struct FlowTransform {
    pub output: Array2<f64>,
    /// Per-row log|det J| of the coupling layers.
    pub logdet: Array1<f64>,
    /// The constant `±d·ln c` from the training-factor scaling.
    pub scale_logdet: f64,
}

impl FlowModel {
    pub fn new(dim: usize, layers: Vec<CouplingLayer>, training_factor: f64, sigma_t: f64) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::config("a flow needs at least two coupling layers"));
        }
        if !(training_factor > 0.0) || !training_factor.is_finite() {
            return Err(Error::config("training factor must be positive"));
        }
        if layers.iter().any(|l| l.cond.len() + l.trans.len() != dim) {
            return Err(Error::config("coupling layer dimension mismatch"));
        }
        Ok(Self {
            dim,
            layers,
            training_factor,
            sigma_t,
        })
    }

    /// Fresh identity-initialized flow with alternating masks.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        n_layers: usize,
        width: usize,
        hidden_layers: usize,
        training_factor: f64,
        sigma_t: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| {
                let parity = if i % 2 == 0 { Parity::Even } else { Parity::Odd };
                CouplingLayer::init(dim, parity, width, hidden_layers, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dim, layers, training_factor, sigma_t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn training_factor(&self) -> f64 {
        self.training_factor
    }

    pub fn sigma_t(&self) -> f64 {
        self.sigma_t
    }

    fn check(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::config(format!(
                "input dimension {} does not match flow dimension {}",
                x.ncols(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("flow input must be finite"));
        }
        Ok(())
    }

    pub fn transform(&self, x: ArrayView2<f64>, direction: Direction) -> Result<FlowTransform> {
        self.check(&x)?;
        let mut logdet = Array1::zeros(x.nrows());
        let c = self.training_factor;
        let dlnc = self.dim as f64 * c.ln();
        let out = match direction {
            Direction::Forward => {
                let mut y = x.to_owned();
                for layer in &self.layers {
                    layer.apply(&mut y, Direction::Forward, &mut logdet)?;
                }
                y *= c;
                FlowTransform {
                    output: y,
                    logdet,
                    scale_logdet: dlnc,
                }
            }
            Direction::Inverse => {
                let mut y = x.mapv(|v| v / c);
                for layer in self.layers.iter().rev() {
                    layer.apply(&mut y, Direction::Inverse, &mut logdet)?;
                }
                FlowTransform {
                    output: y,
                    logdet,
                    scale_logdet: -dlnc,
                }
            }
        };
        Ok(out)
    }

    /// `log p_θ(x) = log N(f⁻¹(x); 0, I) + log|det ∂f⁻¹/∂x|`.
    pub fn log_density(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let inv = self.transform(x, Direction::Inverse)?;
        let base = -0.5 * self.dim as f64 * LN_2PI;
        Ok(inv
            .output
            .rows()
            .into_iter()
            .zip(inv.logdet.iter())
            .map(|(z, ld)| base - 0.5 * z.dot(&z) + ld + inv.scale_logdet)
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleBatch> {
        if n == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        let z = Array2::from_shape_fn((n, self.dim), |_| StandardNormal.sample(rng));
        let fwd = self.transform(z.view(), Direction::Forward)?;
        SampleBatch::new(fwd.output, Provenance::Prior, Some(self.sigma_t))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.scale_net.param_count() + l.shift_net.param_count())
            .sum()
    }

    /// All parameters: per layer, the scale net then the shift net.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.scale_net.write_params(&mut out);
            l.shift_net.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::config("flow parameter vector has the wrong length"));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            offset += l.scale_net.read_params(&flat[offset..])?;
            offset += l.shift_net.read_params(&flat[offset..])?;
        }
        Ok(())
    }

    /// Mean negative log-likelihood over the rows of `x` and its gradient with
    /// respect to [`FlowModel::params`].
    pub fn nll_and_grad(&self, x: ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
        self.check(&x)?;
        let n = x.nrows() as f64;
        let mut y = x.mapv(|v| v / self.training_factor);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter().rev() {
            caches.push(layer.inverse_cached(&mut y)?);
        }
        caches.reverse();
        let z = y;
        let sum_s: f64 = caches.iter().map(|c| c.log_scale.sum()).sum();
        let d = self.dim as f64;
        let nll = 0.5 * d * LN_2PI + 0.5 * z.mapv(|v| v * v).sum() / n
            + sum_s / n
            + d * self.training_factor.ln();

        // Backprop from the base through the inverse layers in forward order.
        let mut grad = z / n;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&caches) {
            let g_out_trans = gather(grad.view(), &layer.trans);
            let inv_scale = cache.log_scale.mapv(|v| (-v).exp());
            // L carries +Σs/n from the log-determinant.
            let g_s = (&g_out_trans * &cache.output_trans).mapv(|v| -v) + 1.0 / n;
            let g_t = (&g_out_trans * &inv_scale).mapv(|v| -v);
            let g_in_trans = &g_out_trans * &inv_scale;
            let g_raw = g_s * cache.log_scale.mapv(|s| SCALE_CLAMP - s * s / SCALE_CLAMP);
            let (g_cond_s, grads_s) = layer.scale_net.backward(&cache.scale_cache, g_raw.view())?;
            let (g_cond_t, grads_t) = layer.shift_net.backward(&cache.shift_cache, g_t.view())?;
            let g_cond = gather(grad.view(), &layer.cond) + g_cond_s + g_cond_t;
            scatter(&mut grad, &layer.cond, &g_cond);
            scatter(&mut grad, &layer.trans, &g_in_trans);
            per_layer.push((grads_s, grads_t));
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for (gs, gt) in &per_layer {
            gs.write_flat(&mut flat);
            gt.write_flat(&mut flat);
        }
        Ok((nll, flat))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "flow v1");
        let _ = writeln!(out, "dim {}", self.dim);
        let _ = writeln!(out, "sigma_t {}", self.sigma_t);
        let _ = writeln!(out, "training_factor {}", self.training_factor);
        let _ = writeln!(out, "layers {}", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(out, "coupling {}", l.parity.name());
            l.scale_net.write_text(&mut out);
            l.shift_net.write_text(&mut out);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rec = TextRecord::new(text);
        let header = rec.expect_fields("flow", 2)?;
        if header[1] != "v1" {
            return Err(Error::Checkpoint(format!("unsupported flow record `{}`", header[1])));
        }
        let dim: usize = rec.keyed("dim")?;
        let sigma_t: f64 = rec.keyed("sigma_t")?;
        let training_factor: f64 = rec.keyed("training_factor")?;
        let n: usize = rec.keyed("layers")?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let parity = match rec.keyed::<String>("coupling")?.as_str() {
                "even" => Parity::Even,
                "odd" => Parity::Odd,
                other => return Err(Error::Checkpoint(format!("unknown mask `{other}`"))),
            };
            let scale_net = Mlp::read_text(&mut rec)?;
            let shift_net = Mlp::read_text(&mut rec)?;
            layers.push(
                CouplingLayer::new(dim, parity, scale_net, shift_net)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            );
        }
        Self::new(dim, layers, training_factor, sigma_t).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl LogDensity for FlowModel {
    fn log_density(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        FlowModel::log_density(self, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    /// Noise the dataset once, then fit.
    Fixed,
    /// Draw fresh noise for the whole dataset every epoch.
    Dynamical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub n_layers: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub training_factor: f64,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            hidden_width: 256,
            hidden_layers: 2,
            lr: 1e-4,
            batch_size: 2048,
            epochs: 100,
            training_factor: 1.0,
            seed: 0,
        }
    }
}

/// Fits a flow to the σ_T-noised dataset by minibatch maximum likelihood.
pub fn train_flow(
    dataset: &SampleBatch,
    sigma_t: f64,
    config: &FlowTrainConfig,
    mode: FlowMode,
) -> Result<(FlowModel, TrainLog)> {
    if !(sigma_t > 0.0) {
        return Err(Error::config("flow training needs σ_T > 0"));
    }
    let n = dataset.len();
    if config.batch_size == 0 || config.batch_size > n || config.epochs == 0 {
        return Err(Error::config(format!(
            "batch size {} must lie in 1..={n} and epochs must be positive",
            config.batch_size
        )));
    }
    let mut init_rng = rng::stream(config.seed, "flow-init");
    let mut noise_rng = rng::stream(config.seed, "flow-noise");
    let mut shuffle_rng = rng::stream(config.seed, "flow-shuffle");
    let mut model = FlowModel::init(
        dataset.dim(),
        config.n_layers,
        config.hidden_width,
        config.hidden_layers,
        config.training_factor,
        sigma_t,
        &mut init_rng,
    )?;
    let mut params = model.params();
    let mut adam = Adam::new(params.len(), AdamConfig::with_lr(config.lr))?;
    let mut noised = forward_noise(dataset, sigma_t, &mut noise_rng)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        if mode == FlowMode::Dynamical && epoch > 0 {
            noised = forward_noise(dataset, sigma_t, &mut noise_rng)?;
        }
        order.shuffle(&mut shuffle_rng);
        let mut losses = Vec::new();
        for idx in order.chunks(config.batch_size) {
            let batch = noised.data.select(Axis(0), idx);
            let (nll, grads) = model.nll_and_grad(batch.view())?;
            if !nll.is_finite() {
                return Err(Error::Training(format!("flow NLL became non-finite in epoch {epoch}")));
            }
            losses.push(nll);
            adam.step(&mut params, &grads)?;
            model.set_params(&params)?;
        }
        log.epoch_losses.push(median(&mut losses));
    }
    Ok((model, log))
}
