//! Dense network substrate shared by the denoiser and the coupling flow.
//!
//! Batches are `n × width` matrices with the batch along axis 0. Weights are
//! stored `out × in` so a layer computes `x · Wᵀ + b`.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows per chunk for cache-free inference; bounds peak memory on large batches.
const INFER_CHUNK: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`, given `a = apply(z)`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::config(format!(
                "layer weight has {} rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("layer parameters must be finite"));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-a..=a));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
            activation,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weight.nrows()
    }

    fn pre_activation(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }
}

/// A chain of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Intermediate values recorded by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("cache holds at least one layer")
    }
}

/// Parameter gradients with the same layout as the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: mlp.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Appends the gradients to `out` in [`Mlp::write_params`] order.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::config(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].output_width(),
                    i + 1,
                    pair[1].input_width()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-initialized network with widths `sizes[0] → … → sizes[last]`;
    /// every layer but the last uses `hidden`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("invalid MLP widths {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output } else { hidden };
                DenseLayer::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    /// Zeroes the final layer so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::config(format!(
                "input width {} does not match network input width {}",
                x.ncols(),
                self.input_width()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x)?;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut current = x.to_owned();
        for layer in &self.layers {
            let z = layer.pre_activation(current.view());
            let act = layer.activation;
            let a = z.mapv(|v| act.apply(v));
            cache.inputs.push(current);
            cache.pre.push(z);
            current = a.clone();
            cache.outputs.push(a);
        }
        Ok((current, cache))
    }

    /// Forward pass without recording a cache, processed in row chunks.
    pub fn infer(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut out = Array2::zeros((x.nrows(), self.output_width()));
        for (xc, mut oc) in x
            .axis_chunks_iter(Axis(0), INFER_CHUNK)
            .zip(out.axis_chunks_iter_mut(Axis(0), INFER_CHUNK))
        {
            let mut current = xc.to_owned();
            for layer in &self.layers {
                let mut z = layer.pre_activation(current.view());
                let act = layer.activation;
                if act != Activation::Identity {
                    z.mapv_inplace(|v| act.apply(v));
                }
                current = z;
            }
            oc.assign(&current);
        }
        Ok(out)
    }

    /// Backpropagates `upstream` (dL/d output) through the cached pass.
    ///
    /// Returns dL/d input and the parameter gradients, summed over the batch.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, MlpGrads)> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::config("cache was produced by a different network"));
        }
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::config(format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        let mut grad = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            if act != Activation::Identity {
                Zip::from(&mut grad)
                    .and(&cache.pre[i])
                    .and(&cache.outputs[i])
                    .for_each(|g, &z, &a| *g *= act.derivative(z, a));
            }
            weights.push(grad.t().dot(&cache.inputs[i]));
            biases.push(grad.sum_axis(Axis(0)));
            grad = grad.dot(&layer.weight);
        }
        weights.reverse();
        biases.reverse();
        Ok((grad, MlpGrads { weights, biases }))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Appends all parameters to `out`: per layer, weights row-major then bias.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    /// Loads parameters from the front of `flat`, returning the number consumed.
    pub fn read_params(&mut self, flat: &[f64]) -> Result<usize> {
        let needed = self.param_count();
        if flat.len() < needed {
            return Err(Error::config(format!(
                "need {needed} parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = flat[offset];
                offset += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[offset];
                offset += 1;
            }
        }
        Ok(offset)
    }

    /// Appends the versioned text record of this network to `out`.
    pub fn write_text(&self, out: &mut String) {
        let _ = writeln!(out, "mlp v1 {}", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(
                out,
                "layer {} {} {}",
                l.input_width(),
                l.output_width(),
                l.activation.name()
            );
            for row in l.weight.rows() {
                push_row(out, row);
            }
            push_row(out, l.bias.view());
        }
    }

    pub fn read_text(lines: &mut TextRecord<'_>) -> Result<Self> {
        let header = lines.expect_fields("mlp", 3)?;
        if header[1] != "v1" {
            return Err(Error::Checkpoint(format!(
                "unsupported MLP record version `{}`",
                header[1]
            )));
        }
        let count: usize = parse_field(header[2])?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let fields = lines.expect_fields("layer", 4)?;
            let fan_in: usize = parse_field(fields[1])?;
            let fan_out: usize = parse_field(fields[2])?;
            let activation = Activation::parse(fields[3])?;
            let mut weight = Array2::zeros((fan_out, fan_in));
            for mut row in weight.rows_mut() {
                let values = lines.floats(fan_in)?;
                row.assign(&ArrayView1::from(&values));
            }
            let bias = Array1::from(lines.floats(fan_out)?);
            layers.push(DenseLayer::new(weight, bias, activation).map_err(|e| {
                Error::Checkpoint(e.to_string())
            })?);
        }
        Self::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub(crate) fn push_row(out: &mut String, row: ArrayView1<f64>) {
    let mut first = true;
    for v in row.iter() {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn parse_field<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Checkpoint(format!("cannot parse `{s}`")))
}

/// Line cursor over a text checkpoint.
pub struct TextRecord<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
}

impl<'a> TextRecord<'a> {
    pub fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().peekable(),
        }
    }

    pub fn next_line(&mut self) -> Result<&'a str> {
        self.lines
            .next()
            .ok_or_else(|| Error::Checkpoint("unexpected end of record".into()))
    }

    /// Reads a line whose first field is `tag` and that has exactly `n` fields.
    pub fn expect_fields(&mut self, tag: &str, n: usize) -> Result<Vec<&'a str>> {
        let line = self.next_line()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&tag) || fields.len() != n {
            return Err(Error::Checkpoint(format!(
                "expected `{tag}` line with {n} fields, found `{line}`"
            )));
        }
        Ok(fields)
    }

    /// Reads `key value` and parses the value.
    pub fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let fields = self.expect_fields(key, 2)?;
        parse_field(fields[1])
    }

    pub fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let line = self.next_line()?;
        let values = line
            .split_whitespace()
            .map(parse_field::<f64>)
            .collect::<Result<Vec<_>>>()?;
        if values.len() != n {
            return Err(Error::Checkpoint(format!(
                "expected {n} values, found {}",
                values.len()
            )));
        }
        Ok(values)
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Median minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, config: AdamConfig) -> Result<Self> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = config;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if eps <= 0.0 || lr <= 0.0 || !lr.is_finite() {
            return Err(Error::config("Adam eps and lr must be positive"));
        }
        Ok(Self {
            config,
            step_count: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::config(format!(
                "Adam state holds {} parameters, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient at parameter {i}"
            )));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
