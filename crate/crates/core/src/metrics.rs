//! Distributional metrics: exact 1D Wasserstein, sliced and max-sliced
//! Wasserstein, and empirical quantile comparisons.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    #[serde(rename = "1")]
    One,
    #[default]
    #[serde(rename = "2")]
    Two,
}

impl Order {
    pub fn from_int(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Order::One),
            2 => Ok(Order::Two),
            _ => Err(Error::config(format!("Wasserstein order must be 1 or 2, got {p}"))),
        }
    }
}

fn sorted(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = v.collect();
    out.sort_by(f64::total_cmp);
    out
}

fn w_sorted(a: &[f64], b: &[f64], order: Order) -> f64 {
    let n = a.len() as f64;
    match order {
        Order::One => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n,
        Order::Two => (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt(),
    }
}

/// Wasserstein distance between two equally sized empirical measures on ℝ.
pub fn wasserstein1d(a: &[f64], b: &[f64], order: Order) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "samples must have equal size, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::config("samples must be non-empty"));
    }
    let sa = sorted(a.iter().copied());
    let sb = sorted(b.iter().copied());
    Ok(w_sorted(&sa, &sb, order))
}

fn check_pair(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != y.ncols() {
        return Err(Error::config("point clouds have different dimensions"));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::config("point clouds must have the same size; subsample first"));
    }
    if x.nrows() == 0 {
        return Err(Error::config("point clouds must be non-empty"));
    }
    Ok(())
}

/// Uniform random unit vector.
pub fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

pub fn projected_distance(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    theta: ArrayView1<f64>,
    order: Order,
) -> Result<f64> {
    check_pair(&x, &y)?;
    let px = sorted(x.dot(&theta).into_iter());
    let py = sorted(y.dot(&theta).into_iter());
    Ok(w_sorted(&px, &py, order))
}

/// Mean projected Wasserstein distance over `n_slices` random directions.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    n_slices: usize,
    order: Order,
    rng: &mut R,
) -> Result<f64> {
    check_pair(&x, &y)?;
    if n_slices == 0 {
        return Err(Error::config("need at least one slice"));
    }
    let mut total = 0.0;
    for _ in 0..n_slices {
        let theta = random_direction(x.ncols(), rng);
        total += projected_distance(x, y, theta.view(), order)?;
    }
    Ok(total / n_slices as f64)
}

/// Inverse stereographic map `ℝ^{d−1} → S^{d−1}`.
pub fn sphere_param(e: ArrayView1<f64>) -> Array1<f64> {
    let s2 = e.dot(&e);
    let denom = s2 + 1.0;
    let mut theta = Array1::zeros(e.len() + 1);
    theta[0] = (s2 - 1.0) / denom;
    for (t, v) in theta.iter_mut().skip(1).zip(e.iter()) {
        *t = 2.0 * v / denom;
    }
    theta
}

/// Vector-Jacobian product of [`sphere_param`]: maps dL/dθ to dL/dE.
fn sphere_param_vjp(e: ArrayView1<f64>, g_theta: ArrayView1<f64>) -> Array1<f64> {
    let s2 = e.dot(&e);
    let denom = s2 + 1.0;
    let tail = g_theta.slice(ndarray::s![1..]);
    let coupling = 4.0 * g_theta[0] / (denom * denom) - 4.0 * tail.dot(&e) / (denom * denom);
    &tail * (2.0 / denom) + &e * coupling
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaxSwConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub lr: f64,
    pub seed: u64,
    /// Independent random starts; the best result is kept.
    pub restarts: usize,
}

impl Default for MaxSwConfig {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 500,
            lr: 0.1,
            seed: 0,
            restarts: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaxSwResult {
    pub value: f64,
    pub direction: Array1<f64>,
    pub iterations: usize,
}

/// Projected distance and its gradient with respect to `θ`, holding the
/// sorting permutations fixed.
fn objective_and_grad(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    theta: ArrayView1<f64>,
    order: Order,
) -> (f64, Array1<f64>) {
    let n = x.nrows();
    let px = x.dot(&theta);
    let py = y.dot(&theta);
    let mut ix: Vec<usize> = (0..n).collect();
    let mut iy: Vec<usize> = (0..n).collect();
    ix.sort_by(|&a, &b| px[a].total_cmp(&px[b]).then(a.cmp(&b)));
    iy.sort_by(|&a, &b| py[a].total_cmp(&py[b]).then(a.cmp(&b)));
    let gaps: Vec<f64> = ix.iter().zip(&iy).map(|(&i, &j)| px[i] - py[j]).collect();
    let weights: Vec<f64>;
    let value = match order {
        Order::One => {
            weights = gaps.iter().map(|g| g.signum() / n as f64).collect();
            gaps.iter().map(|g| g.abs()).sum::<f64>() / n as f64
        }
        Order::Two => {
            let w = (gaps.iter().map(|g| g * g).sum::<f64>() / n as f64).sqrt();
            let scale = if w > 0.0 { 1.0 / (n as f64 * w) } else { 0.0 };
            weights = gaps.iter().map(|g| g * scale).collect();
            w
        }
    };
    let mut grad = Array1::zeros(x.ncols());
    for ((&i, &j), &w) in ix.iter().zip(&iy).zip(&weights) {
        if w != 0.0 {
            grad.scaled_add(w, &(&x.row(i) - &y.row(j)));
        }
    }
    (value, grad)
}

/// Adam ascent over the sphere parameterization. Each start stops when the
/// objective changes by less than `tol` or after `max_iter` steps; the best
/// value seen across all starts is returned.
pub fn max_sliced_wasserstein(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &MaxSwConfig,
    order: Order,
) -> Result<MaxSwResult> {
    check_pair(&x, &y)?;
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 || cfg.restarts == 0 {
        return Err(Error::config("Max-SW needs tol > 0, max_iter ≥ 1 and restarts ≥ 1"));
    }
    let d = x.ncols();
    if d == 1 {
        let theta = Array1::ones(1);
        let value = projected_distance(x, y, theta.view(), order)?;
        return Ok(MaxSwResult {
            value,
            direction: theta,
            iterations: 0,
        });
    }
    let mut init_rng = rng::stream(cfg.seed, "max-sw");
    let mut best: Option<MaxSwResult> = None;
    let mut iterations = 0;
    for _ in 0..cfg.restarts {
        let mut e: Vec<f64> = (0..d - 1).map(|_| StandardNormal.sample(&mut init_rng)).collect();
        let mut adam = Adam::new(d - 1, AdamConfig::with_lr(cfg.lr))?;
        let mut previous: Option<f64> = None;
        for _ in 0..cfg.max_iter {
            iterations += 1;
            let ev = ArrayView1::from(&e[..]);
            let theta = sphere_param(ev);
            let (value, g_theta) = objective_and_grad(x, y, theta.view(), order);
            if !value.is_finite() {
                return Err(Error::Metric("Max-SW objective became non-finite".into()));
            }
            if best.as_ref().is_none_or(|b| value > b.value) {
                best = Some(MaxSwResult {
                    value,
                    direction: theta,
                    iterations: 0,
                });
            }
            if previous.is_some_and(|p| (value - p).abs() < cfg.tol) {
                break;
            }
            previous = Some(value);
            let g_e = sphere_param_vjp(ev, g_theta.view());
            let ascent: Vec<f64> = g_e.iter().map(|g| -g).collect();
            adam.step(&mut e, &ascent)?;
        }
    }
    let mut best = best.expect("at least one iteration ran");
    best.iterations = iterations;
    Ok(best)
}

/// Nearest-rank quantile: the order statistic at rank `⌈q·n⌉`.
pub fn empirical_quantile(samples: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::config(format!("quantile level must lie in (0, 1), got {q}")));
    }
    if samples.is_empty() {
        return Err(Error::config("cannot take a quantile of an empty sample"));
    }
    let n = samples.len();
    let mut v = samples.to_vec();
    let rank = quantile_rank(q, n);
    let (_, value, _) = v.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*value)
}

fn quantile_rank(q: f64, n: usize) -> usize {
    let qn = q * n as f64;
    let nearest = qn.round();
    let rank = if (qn - nearest).abs() <= 1e-9 * qn.max(1.0) {
        nearest
    } else {
        qn.ceil()
    };
    (rank as usize).clamp(1, n)
}

/// Relative quantile error of one level, averaged over coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileError {
    pub q: f64,
    pub mean: f64,
    pub std: f64,
    pub per_dim: Vec<f64>,
}

/// `|x_q − x̂_q| / |x_q|` per coordinate, with `x_q` from `reference` and
/// `x̂_q` from `generated`.
pub fn quantile_rel_error(
    generated: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    qs: &[f64],
) -> Result<Vec<QuantileError>> {
    if generated.ncols() != reference.ncols() {
        return Err(Error::config("generated and reference dimensions differ"));
    }
    let gen_cols: Vec<Vec<f64>> = generated.axis_iter(Axis(1)).map(|c| sorted(c.iter().copied())).collect();
    let ref_cols: Vec<Vec<f64>> = reference.axis_iter(Axis(1)).map(|c| sorted(c.iter().copied())).collect();
    let mut out = Vec::with_capacity(qs.len());
    for &q in qs {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::config(format!("quantile level must lie in (0, 1), got {q}")));
        }
        let mut per_dim = Vec::with_capacity(gen_cols.len());
        for (g, r) in gen_cols.iter().zip(&ref_cols) {
            let xq = r[quantile_rank(q, r.len()) - 1];
            let xhat = g[quantile_rank(q, g.len()) - 1];
            if xq == 0.0 {
                return Err(Error::Metric(format!("reference quantile at q = {q} is zero")));
            }
            per_dim.push((xq - xhat).abs() / xq.abs());
        }
        let (mean, std) = mean_std(&per_dim);
        out.push(QuantileError { q, mean, std, per_dim });
    }
    Ok(out)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Uniformly subsamples rows so that both clouds have `min(n_x, n_y, cap)`
/// rows.
pub fn match_sizes<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cap: Option<usize>,
    rng: &mut R,
) -> (Array2<f64>, Array2<f64>) {
    let m = x.nrows().min(y.nrows()).min(cap.unwrap_or(usize::MAX));
    let pick = |a: ArrayView2<f64>, rng: &mut R| {
        if a.nrows() == m {
            a.to_owned()
        } else {
            let mut idx = index::sample(rng, a.nrows(), m).into_vec();
            idx.sort_unstable();
            a.select(Axis(0), &idx)
        }
    };
    let xs = pick(x, rng);
    let ys = pick(y, rng);
    (xs, ys)
}

/// Metrics of one generated cloud against a reference cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub swd: f64,
    pub max_swd: f64,
    pub direction: Vec<f64>,
    pub quantiles: Vec<QuantileError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricProtocol {
    pub n_slices: usize,
    pub order: Order,
    pub max_sw: MaxSwConfig,
    pub quantiles: Vec<f64>,
    /// Row cap for the sliced distances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_samples: Option<usize>,
}

impl Default for MetricProtocol {
    fn default() -> Self {
        Self {
            n_slices: 500,
            order: Order::Two,
            max_sw: MaxSwConfig::default(),
            quantiles: vec![0.9, 0.99, 0.999],
            distance_samples: Some(10_000),
        }
    }
}

pub fn evaluate(
    generated: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    protocol: &MetricProtocol,
    seed: u64,
) -> Result<MetricReport> {
    let mut sub_rng = rng::stream(seed, "metric-subsample");
    let mut slice_rng = rng::stream(seed, "metric-slices");
    let (gx, rx) = match_sizes(generated, reference, protocol.distance_samples, &mut sub_rng);
    let swd = sliced_wasserstein(gx.view(), rx.view(), protocol.n_slices, protocol.order, &mut slice_rng)?;
    let max_cfg = MaxSwConfig {
        seed: rng::derive_seed(seed, "metric-max-sw"),
        ..protocol.max_sw
    };
    let max = max_sliced_wasserstein(gx.view(), rx.view(), &max_cfg, protocol.order)?;
    let quantiles = if protocol.quantiles.is_empty() {
        Vec::new()
    } else {
        quantile_rel_error(generated, reference, &protocol.quantiles)?
    };
    Ok(MetricReport {
        swd,
        max_swd: max.value,
        direction: max.direction.to_vec(),
        quantiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn trivial_wasserstein_cases() {
        for order in [Order::One, Order::Two] {
            assert_eq!(wasserstein1d(&[0.0, 1.0], &[0.0, 1.0], order).unwrap(), 0.0);
            assert_eq!(wasserstein1d(&[0.0, 2.0], &[1.0, 3.0], order).unwrap(), 1.0);
        }
        assert!(wasserstein1d(&[0.0], &[0.0, 1.0], Order::One).is_err());
        assert!(Order::from_int(3).is_err());
    }

    #[test]
    fn sphere_param_examples() {
        assert_eq!(sphere_param(array![0.0, 0.0].view()), array![-1.0, 0.0, 0.0]);
        assert_eq!(sphere_param(array![1.0].view()), array![0.0, 1.0]);
    }

    #[test]
    fn sphere_param_vjp_matches_finite_differences() {
        let mut r = rng::from_seed(3);
        for _ in 0..20 {
            let e: Array1<f64> = (0..4).map(|_| StandardNormal.sample(&mut r)).collect();
            let g: Array1<f64> = (0..5).map(|_| StandardNormal.sample(&mut r)).collect();
            let an = sphere_param_vjp(e.view(), g.view());
            for j in 0..4 {
                let h = 1e-6;
                let mut up = e.clone();
                up[j] += h;
                let mut dn = e.clone();
                dn[j] -= h;
                let fd = (sphere_param(up.view()).dot(&g) - sphere_param(dn.view()).dot(&g)) / (2.0 * h);
                assert_abs_diff_eq!(fd, an[j], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn quantile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(empirical_quantile(&v, 0.5).unwrap(), 50.0);
        assert_eq!(empirical_quantile(&v, 0.99).unwrap(), 99.0);
        assert_eq!(empirical_quantile(&v, 0.001).unwrap(), 1.0);
        assert!(empirical_quantile(&v, 1.0).is_err());
        assert!(empirical_quantile(&v, 0.0).is_err());
    }

    #[test]
    fn rel_error_formula() {
        let reference = Array2::from_shape_fn((100, 1), |(i, _)| 2.0 * (i + 1) as f64 / 99.0);
        let generated = reference.mapv(|v| v / 2.0);
        let err = quantile_rel_error(generated.view(), reference.view(), &[0.99]).unwrap();
        assert_abs_diff_eq!(err[0].mean, 0.5, epsilon = 1e-15);
        let same = quantile_rel_error(reference.view(), reference.view(), &[0.5, 0.9]).unwrap();
        assert!(same.iter().all(|e| e.mean == 0.0));
        let zeros = Array2::zeros((10, 1));
        assert!(matches!(
            quantile_rel_error(zeros.view(), zeros.view(), &[0.5]),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn identical_clouds_have_zero_distances() {
        let mut r = rng::from_seed(1);
        let x = Array2::from_shape_fn((200, 3), |_| StandardNormal.sample(&mut r));
        assert_eq!(sliced_wasserstein(x.view(), x.view(), 50, Order::Two, &mut r).unwrap(), 0.0);
        let m = max_sliced_wasserstein(x.view(), x.view(), &MaxSwConfig::default(), Order::One).unwrap();
        assert_eq!(m.value, 0.0);
    }

    #[test]
    fn match_sizes_caps_rows() {
        let mut r = rng::from_seed(2);
        let x = Array2::<f64>::zeros((50, 2));
        let y = Array2::<f64>::ones((80, 2));
        let (a, b) = match_sizes(x.view(), y.view(), Some(30), &mut r);
        assert_eq!((a.nrows(), b.nrows()), (30, 30));
        let (a, b) = match_sizes(x.view(), y.view(), None, &mut r);
        assert_eq!((a.nrows(), b.nrows()), (50, 50));
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
