//! Analytic targets: the anisotropic 25-component Gaussian mixture and the
//! symmetric heavy-tailed Student-t mixture, with samplers, noised densities,
//! analytic scores, and the forward noising map `X_σ = X_0 + σZ`.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::score::{LogDensity, ScoreModel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Target,
    Noised,
    Prior,
    Generated,
}

/// `n × d` points plus where they came from and, if noised, at which level.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub data: Array2<f64>,
    pub provenance: Provenance,
    pub sigma: Option<f64>,
}

impl SampleBatch {
    pub fn new(data: Array2<f64>, provenance: Provenance, sigma: Option<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::config("a sample batch needs at least one row"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("sample batch contains non-finite entries"));
        }
        Ok(Self {
            data,
            provenance,
            sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }
}

/// Gaussian mixture `Σ wᵢ N(μᵢ, RᵢΛᵢRᵢᵀ)` stored through its eigendecompositions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    dim: usize,
    seed: Option<u64>,
    weights: Vec<f64>,
    /// `K × d`
    means: Array2<f64>,
    /// One orthogonal `d × d` matrix per component.
    rotations: Vec<Array2<f64>>,
    /// `K × d`, each row sorted decreasing.
    eigenvalues: Array2<f64>,
}

impl GmmSpec {
    pub fn new(
        weights: Vec<f64>,
        means: Array2<f64>,
        rotations: Vec<Array2<f64>>,
        eigenvalues: Array2<f64>,
    ) -> Result<Self> {
        let k = weights.len();
        let d = means.ncols();
        if k == 0 || d == 0 {
            return Err(Error::config("mixture needs at least one component and dimension"));
        }
        if means.nrows() != k || rotations.len() != k || eigenvalues.dim() != (k, d) {
            return Err(Error::config("mixture parameter shapes are inconsistent"));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("mixture weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("mixture weights sum to {total}, not 1")));
        }
        for (i, r) in rotations.iter().enumerate() {
            if r.dim() != (d, d) {
                return Err(Error::config(format!("rotation {i} is not {d}×{d}")));
            }
            let defect = r.t().dot(r) - Array2::<f64>::eye(d);
            if defect.iter().any(|v| v.abs() >= 1e-10) {
                return Err(Error::config(format!("rotation {i} is not orthogonal")));
            }
        }
        for row in eigenvalues.rows() {
            if row.iter().any(|&l| !(l > 0.0)) {
                return Err(Error::config("eigenvalues must be positive"));
            }
            if row.windows(2).into_iter().any(|w| w[0] < w[1]) {
                return Err(Error::config("eigenvalues must be sorted decreasing"));
            }
        }
        Ok(Self {
            dim: d,
            seed: None,
            weights,
            means,
            rotations,
            eigenvalues,
        })
    }

    /// Mixture of isotropic components `N(μᵢ, v·I)`.
    pub fn isotropic(weights: Vec<f64>, means: Array2<f64>, variance: f64) -> Result<Self> {
        let (k, d) = means.dim();
        Self::new(
            weights,
            means,
            vec![Array2::eye(d); k],
            Array2::from_elem((k, d), variance),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn rotation(&self, i: usize) -> &Array2<f64> {
        &self.rotations[i]
    }

    pub fn eigenvalues(&self) -> &Array2<f64> {
        &self.eigenvalues
    }

    /// `Σᵢ = RᵢΛᵢRᵢᵀ`.
    pub fn covariance(&self, i: usize) -> Array2<f64> {
        let r = &self.rotations[i];
        let scaled = r * &self.eigenvalues.row(i);
        scaled.dot(&r.t())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mixture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: GmmSpec =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let seed = raw.seed;
        let mut spec = Self::new(raw.weights, raw.means, raw.rotations, raw.eigenvalues)?;
        spec.seed = seed;
        Ok(spec)
    }

    /// Per-component log-terms `log wᵢ + log N(x; μᵢ, Σᵢ + σ²I)` for a chunk,
    /// plus the whitened coordinates `(Rᵢᵀ(x − μᵢ)) / (λᵢ + σ²)` when requested.
    fn component_terms(
        &self,
        x: ArrayView2<f64>,
        sigma: f64,
        want_whitened: bool,
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let n = x.nrows();
        let k = self.n_components();
        let s2 = sigma * sigma;
        let mut logs = Array2::zeros((n, k));
        let mut whitened = Vec::with_capacity(if want_whitened { k } else { 0 });
        for c in 0..k {
            let w = self.weights[c];
            if w == 0.0 {
                logs.column_mut(c).fill(f64::NEG_INFINITY);
                if want_whitened {
                    whitened.push(Array2::zeros((n, self.dim)));
                }
                continue;
            }
            let var: Array1<f64> = self.eigenvalues.row(c).mapv(|l| l + s2);
            let log_det: f64 = var.iter().map(|v| v.ln()).sum();
            let base = w.ln() - 0.5 * (self.dim as f64 * LN_2PI + log_det);
            let diff = &x - &self.means.row(c);
            let mut y = diff.dot(&self.rotations[c]);
            let mut col = logs.column_mut(c);
            for (i, mut row) in y.rows_mut().into_iter().enumerate() {
                let mut quad = 0.0;
                for (yi, vi) in row.iter_mut().zip(var.iter()) {
                    quad += *yi * *yi / vi;
                    *yi /= vi;
                }
                col[i] = base - 0.5 * quad;
            }
            if want_whitened {
                whitened.push(y);
            }
        }
        (logs, whitened)
    }

    /// `log p_σ(x)` for each row.
    pub fn noised_log_density(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array1<f64>> {
        self.check_eval(&x, sigma)?;
        let mut out = Array1::zeros(x.nrows());
        for (xc, mut oc) in x
            .axis_chunks_iter(Axis(0), EVAL_CHUNK)
            .zip(out.axis_chunks_iter_mut(Axis(0), EVAL_CHUNK))
        {
            let (logs, _) = self.component_terms(xc, sigma, false);
            for (o, row) in oc.iter_mut().zip(logs.rows()) {
                *o = log_sum_exp(row.iter().copied());
            }
        }
        Ok(out)
    }

    /// `∇ₓ log p_σ(x)`: responsibility-weighted per-component Gaussian scores.
    pub fn noised_score(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        self.check_eval(&x, sigma)?;
        let mut out = Array2::zeros(x.raw_dim());
        for (xc, mut oc) in x
            .axis_chunks_iter(Axis(0), EVAL_CHUNK)
            .zip(out.axis_chunks_iter_mut(Axis(0), EVAL_CHUNK))
        {
            let (mut logs, whitened) = self.component_terms(xc, sigma, true);
            for mut row in logs.rows_mut() {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - m).exp());
                let total = row.sum();
                row /= total;
            }
            for (c, y) in whitened.iter().enumerate() {
                if self.weights[c] == 0.0 {
                    continue;
                }
                // Rᵢ (Λᵢ + σ²)⁻¹ Rᵢᵀ (μᵢ − x), weighted by responsibility.
                let mut contrib = y.dot(&self.rotations[c].t());
                contrib *= &logs.column(c).insert_axis(Axis(1));
                oc -= &contrib;
            }
        }
        Ok(out)
    }

    fn check_eval(&self, x: &ArrayView2<f64>, sigma: f64) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::config(format!(
                "points have dimension {} but the mixture has {}",
                x.ncols(),
                self.dim
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::config("noise level must be non-negative"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleBatch> {
        if n == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        let chooser = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::config(format!("invalid mixture weights: {e}")))?;
        let sqrt_eig = self.eigenvalues.mapv(f64::sqrt);
        let mut data = Array2::zeros((n, self.dim));
        let mut z = Array1::zeros(self.dim);
        for mut row in data.rows_mut() {
            let c = chooser.sample(rng);
            for (zi, si) in z.iter_mut().zip(sqrt_eig.row(c)) {
                let g: f64 = StandardNormal.sample(rng);
                *zi = g * si;
            }
            row.assign(&(self.rotations[c].dot(&z) + self.means.row(c)));
        }
        SampleBatch::new(data, Provenance::Target, None)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Random 25-component mixture: first two mean coordinates on the grid
/// `{-10, -5, 0, 5, 10}²`, eigenvalues `k^{-3/4}`, random orientations and
/// χ²₃ weights.
pub fn make_random_gmm(dim: usize, seed: u64) -> Result<GmmSpec> {
    if dim < 2 {
        return Err(Error::config(format!("mixture dimension must be ≥ 2, got {dim}")));
    }
    let mut rng = rng::stream(seed, "gmm-spec");
    let k = 25;
    let mut means = Array2::zeros((k, dim));
    for (c, mut row) in means.rows_mut().into_iter().enumerate() {
        let i = (c / 5) as f64 - 2.0;
        let j = (c % 5) as f64 - 2.0;
        row[0] = 5.0 * i;
        row[1] = 5.0 * j;
    }
    let lambda: Array1<f64> = (1..=dim).map(|k| (k as f64).powf(-0.75)).collect();
    let eigenvalues = Array2::from_shape_fn((k, dim), |(_, j)| lambda[j]);
    let rotations = (0..k).map(|_| random_rotation(dim, &mut rng)).collect();
    let chi = ChiSquared::new(3.0).expect("valid dof");
    let raw: Vec<f64> = (0..k).map(|_| chi.sample(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    // Absorb the rounding residue so the weights sum to one to machine precision.
    let residue = 1.0 - weights.iter().sum::<f64>();
    let largest = (0..k)
        .max_by(|&a, &b| weights[a].total_cmp(&weights[b]))
        .expect("non-empty");
    weights[largest] += residue;
    let mut spec = GmmSpec::new(weights, means, rotations, eigenvalues)?;
    spec.seed = Some(seed);
    Ok(spec)
}

/// Orthogonal factor of a standard Gaussian matrix, with column signs fixed so
/// the triangular factor has a positive diagonal.
fn random_rotation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array2<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    Array2::from_shape_fn((d, d), |(i, j)| {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * sign
    })
}

/// Noised mixture `p_σ` as a [`LogDensity`].
#[derive(Clone, Copy, Debug)]
pub struct NoisedGmm<'a> {
    pub spec: &'a GmmSpec,
    pub sigma: f64,
}

impl LogDensity for NoisedGmm<'_> {
    fn log_density(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.spec.noised_log_density(x, self.sigma)
    }
}

impl ScoreModel for GmmSpec {
    fn kind(&self) -> &'static str {
        "analytic-gmm"
    }

    fn score(&self, x: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        self.noised_score(x, sigma)
    }
}

/// Tail behaviour of a location-scale Student-t family; `Gaussian` is the ν → ∞ limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Tail {
    StudentT { dof: f64 },
    Gaussian,
}

impl Tail {
    fn validate(self) -> Result<Self> {
        match self {
            Tail::StudentT { dof } if !(dof > 0.0) || !dof.is_finite() => Err(Error::config(
                format!("degrees of freedom must be positive and finite, got {dof}"),
            )),
            t => Ok(t),
        }
    }
}

/// Symmetric two-component multivariate-t mixture `W = B·T₊ + (1−B)·T₋`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HtSpec {
    pub dim: usize,
    pub tail: Tail,
}

impl HtSpec {
    pub fn new(dim: usize, dof: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dimension must be positive"));
        }
        Ok(Self {
            dim,
            tail: Tail::StudentT { dof }.validate()?,
        })
    }

    /// Same locations with Gaussian components.
    pub fn gaussian_limit(dim: usize) -> Self {
        Self {
            dim,
            tail: Tail::Gaussian,
        }
    }

    /// Location of the positive component, `(1/√d, …, 1/√d)`.
    pub fn location(&self) -> Array1<f64> {
        Array1::from_elem(self.dim, 1.0 / (self.dim as f64).sqrt())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: HtSpec =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        spec.tail.validate()?;
        Ok(spec)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleBatch> {
        let data = sample_t_mixture(self.location().view(), self.tail, 0.0, n, rng)?;
        SampleBatch::new(data, Provenance::Target, None)
    }
}

/// Draws `n` rows of `±loc + z·√(ν/χ²_ν) + noise·ε` with the sign chosen by a
/// fair coin, `z, ε ~ N(0, I)` and a single χ² draw shared across coordinates.
pub(crate) fn sample_t_mixture<R: Rng + ?Sized>(
    loc: ndarray::ArrayView1<f64>,
    tail: Tail,
    noise: f64,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::config("sample count must be at least 1"));
    }
    let tail = tail.validate()?;
    let chi = match tail {
        Tail::StudentT { dof } => Some((dof, ChiSquared::new(dof).expect("validated dof"))),
        Tail::Gaussian => None,
    };
    let d = loc.len();
    let mut data = Array2::zeros((n, d));
    for mut row in data.rows_mut() {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let scale = match &chi {
            Some((dof, chi)) => {
                let c: f64 = chi.sample(rng);
                (dof / c).sqrt()
            }
            None => 1.0,
        };
        for (x, &l) in row.iter_mut().zip(loc.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *x = sign * l + scale * z;
        }
        if noise > 0.0 {
            for x in row.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *x += noise * e;
            }
        }
    }
    Ok(data)
}

/// `X + σZ` row-wise with independent standard normal `Z`.
pub fn forward_noise<R: Rng + ?Sized>(
    batch: &SampleBatch,
    sigma: f64,
    rng: &mut R,
) -> Result<SampleBatch> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("noise level must be ≥ 0, got {sigma}")));
    }
    let mut data = batch.data.clone();
    if sigma > 0.0 {
        data.mapv_inplace(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        });
    }
    let prior = batch.sigma.unwrap_or(0.0);
    SampleBatch::new(
        data,
        Provenance::Noised,
        Some((prior * prior + sigma * sigma).sqrt()),
    )
}

/// Per-coordinate mean and (population) variance.
pub fn column_moments(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let var = x.var_axis(Axis(0), 0.0);
    (mean, var)
}

/// Sample covariance (population normalization).
pub fn covariance(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centred = &x - &mean;
    centred.t().dot(&centred) / x.nrows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn standard_normal_1d() -> GmmSpec {
        GmmSpec::isotropic(vec![1.0], array![[0.0]], 1.0).unwrap()
    }

    #[test]
    fn grid_means_and_power_law_eigenvalues() {
        let spec = make_random_gmm(2, 17).unwrap();
        let mut pts: Vec<(i64, i64)> = spec
            .means()
            .rows()
            .into_iter()
            .map(|r| (r[0] as i64, r[1] as i64))
            .collect();
        pts.sort();
        let mut expected = Vec::new();
        for i in [-10, -5, 0, 5, 10] {
            for j in [-10, -5, 0, 5, 10] {
                expected.push((i, j));
            }
        }
        assert_eq!(pts, expected);

        let spec = make_random_gmm(5, 3).unwrap();
        assert_eq!(spec.eigenvalues()[[0, 0]], 1.0);
        assert_abs_diff_eq!(spec.eigenvalues()[[0, 3]], 0.353_553_390_593_273_8, epsilon = 1e-12);
        assert!(spec.means().column(4).iter().all(|&v| v == 0.0));
        for c in 0..25 {
            let r = spec.rotation(c);
            let defect = r.t().dot(r) - Array2::<f64>::eye(5);
            assert!(defect.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn weights_normalized_across_seeds() {
        for seed in 0..1000 {
            let spec = make_random_gmm(2, seed).unwrap();
            let total: f64 = spec.weights().iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            assert!(spec.weights().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn construction_is_seed_deterministic_and_rejects_low_dimension() {
        assert_eq!(make_random_gmm(4, 9).unwrap(), make_random_gmm(4, 9).unwrap());
        assert_ne!(make_random_gmm(4, 9).unwrap(), make_random_gmm(4, 10).unwrap());
        assert!(matches!(make_random_gmm(1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn json_record_round_trips() {
        let spec = make_random_gmm(3, 4).unwrap();
        let back = GmmSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
        let ht = HtSpec::new(10, 3.0).unwrap();
        assert_eq!(HtSpec::from_json(&ht.to_json()).unwrap(), ht);
    }

    #[test]
    fn standard_normal_log_density_closed_forms() {
        let spec = standard_normal_1d();
        let x = array![[0.0]];
        let at0 = spec.noised_log_density(x.view(), 0.0).unwrap()[0];
        assert_abs_diff_eq!(at0, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
        let at1 = spec.noised_log_density(x.view(), 1.0).unwrap()[0];
        assert_abs_diff_eq!(at1, -0.5 * (4.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn noised_density_integrates_to_one_on_grid() {
        let spec = make_random_gmm(2, 21).unwrap();
        for sigma in [0.0, 2.0, 7.0] {
            let half = 15.0 + 6.0 * sigma;
            let h = 0.04 * (1.0 + sigma);
            let m = (2.0 * half / h) as usize;
            let coords: Vec<f64> = (0..m).map(|i| -half + (i as f64 + 0.5) * h).collect();
            let mut total = 0.0;
            for &a in &coords {
                let pts = Array2::from_shape_fn((m, 2), |(i, j)| if j == 0 { a } else { coords[i] });
                total += spec
                    .noised_log_density(pts.view(), sigma)
                    .unwrap()
                    .mapv(f64::exp)
                    .sum();
            }
            total *= h * h;
            assert!((total - 1.0).abs() < 1e-3, "σ={sigma}: mass {total}");
        }
    }

    #[test]
    fn single_gaussian_score_closed_form() {
        let spec = GmmSpec::isotropic(vec![1.0], array![[0.0, 0.0, 0.0]], 1.0).unwrap();
        let x = array![[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]];
        for sigma in [0.0, 0.7, 3.0] {
            let s = spec.noised_score(x.view(), sigma).unwrap();
            let expected = x.mapv(|v| -v / (1.0 + sigma * sigma));
            for (a, b) in s.iter().zip(expected.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn symmetric_pair_has_zero_score_at_origin() {
        let spec = GmmSpec::isotropic(vec![0.5, 0.5], array![[1.5, -1.0], [-1.5, 1.0]], 0.8).unwrap();
        let s = spec.noised_score(array![[0.0, 0.0]].view(), 0.3).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn score_matches_finite_differences_of_log_density() {
        let mut r = rng::from_seed(8);
        for trial in 0..100 {
            let d = 2 + trial % 4;
            let spec = make_random_gmm(d, trial as u64).unwrap();
            let sigma = [0.0, 0.3, 1.0, 2.0, 7.0][trial % 5];
            let x = Array2::from_shape_fn((1, d), |_| {
                let g: f64 = StandardNormal.sample(&mut r);
                6.0 * g
            });
            let score = spec.noised_score(x.view(), sigma).unwrap();
            let h = 1e-5;
            for j in 0..d {
                let mut xp = x.clone();
                xp[[0, j]] += h;
                let mut xm = x.clone();
                xm[[0, j]] -= h;
                let fd = (spec.noised_log_density(xp.view(), sigma).unwrap()[0]
                    - spec.noised_log_density(xm.view(), sigma).unwrap()[0])
                    / (2.0 * h);
                let a = score[[0, j]];
                let err = (fd - a).abs() / a.abs().max(1.0);
                assert!(err < 1e-5, "trial {trial} coord {j}: fd {fd} vs {a}");
            }
        }
    }

    #[test]
    fn gaussian_sample_mean_within_clt_bound() {
        let d = 3;
        let spec = GmmSpec::isotropic(vec![1.0], Array2::zeros((1, d)), 1.0).unwrap();
        let n = 100_000;
        let batch = spec.sample(n, &mut rng::from_seed(1)).unwrap();
        let (mean, _) = column_moments(batch.view());
        let bound = 3.0 / (n as f64).sqrt() * (d as f64).sqrt();
        assert!(mean.iter().all(|m| m.abs() < bound), "{mean}");
    }

    #[test]
    fn degenerate_weights_pick_first_component() {
        let spec = GmmSpec::isotropic(
            vec![1.0, 0.0, 0.0],
            array![[100.0, 0.0], [-100.0, 0.0], [0.0, 100.0]],
            1.0,
        )
        .unwrap();
        let batch = spec.sample(500, &mut rng::from_seed(2)).unwrap();
        assert!(batch.data.column(0).iter().all(|&v| v > 90.0));
    }

    #[test]
    fn single_component_empirical_covariance() {
        let full = make_random_gmm(3, 5).unwrap();
        let mut w = vec![0.0; 25];
        w[0] = 1.0;
        let spec = GmmSpec::new(
            w,
            full.means().clone(),
            (0..25).map(|c| full.rotation(c).clone()).collect(),
            full.eigenvalues().clone(),
        )
        .unwrap();
        let batch = spec.sample(100_000, &mut rng::from_seed(3)).unwrap();
        let emp = covariance(batch.view());
        let truth = spec.covariance(0);
        let rel = (&emp - &truth).mapv(|v| v * v).sum().sqrt() / truth.mapv(|v| v * v).sum().sqrt();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn heavy_tail_sample_is_symmetric() {
        let spec = HtSpec::new(4, 3.0).unwrap();
        let batch = spec.sample(1_000_000, &mut rng::from_seed(4)).unwrap();
        let (mean, _) = column_moments(batch.view());
        assert!(mean.iter().all(|m| m.abs() < 0.01 * 2.0), "{mean}");
    }

    #[test]
    fn gaussian_limit_reproduces_mixture_moments() {
        let d = 4;
        let spec = HtSpec::gaussian_limit(d);
        let batch = spec.sample(200_000, &mut rng::from_seed(6)).unwrap();
        let (mean, var) = column_moments(batch.view());
        // Var = 1 + 1/d from the ±1/√d location coin.
        for (m, v) in mean.iter().zip(var.iter()) {
            assert!(m.abs() < 0.01);
            assert!((v - (1.0 + 1.0 / d as f64)).abs() < 0.02, "var {v}");
        }
        assert!(HtSpec::new(3, 0.0).is_err());
    }

    #[test]
    fn zero_noise_is_identity_and_variance_adds() {
        let clean = HtSpec::gaussian_limit(2).sample(10, &mut rng::from_seed(1)).unwrap();
        let same = forward_noise(&clean, 0.0, &mut rng::from_seed(2)).unwrap();
        assert_eq!(same.data, clean.data);

        let zeros = SampleBatch::new(Array2::zeros((100_000, 2)), Provenance::Target, None).unwrap();
        let noised = forward_noise(&zeros, 2.0, &mut rng::from_seed(3)).unwrap();
        let (_, var) = column_moments(noised.view());
        assert!(var.iter().all(|v| (v - 4.0).abs() < 0.2), "{var}");
        assert_eq!(noised.sigma, Some(2.0));

        let spec = make_random_gmm(2, 0).unwrap();
        let x = spec.sample(100_000, &mut rng::from_seed(4)).unwrap();
        let (_, v0) = column_moments(x.view());
        let y = forward_noise(&x, 1.5, &mut rng::from_seed(5)).unwrap();
        let (_, v1) = column_moments(y.view());
        for (a, b) in v0.iter().zip(v1.iter()) {
            assert!(((b - a - 2.25) / (a + 2.25)).abs() < 0.05);
        }
        assert!(forward_noise(&x, -1.0, &mut rng::from_seed(5)).is_err());
    }

    #[test]
    fn noising_semigroup_second_moments() {
        let spec = make_random_gmm(2, 1).unwrap();
        let x = spec.sample(100_000, &mut rng::from_seed(10)).unwrap();
        let (a, b) = (1.2, 2.5);
        let two = forward_noise(&forward_noise(&x, a, &mut rng::from_seed(11)).unwrap(), b, &mut rng::from_seed(12)).unwrap();
        let one = forward_noise(&x, (a * a + b * b).sqrt(), &mut rng::from_seed(13)).unwrap();
        let m2 = |batch: &SampleBatch| batch.data.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        for (p, q) in m2(&two).iter().zip(m2(&one).iter()) {
            assert!(((p - q) / q).abs() < 0.05);
        }
        assert!((two.sigma.unwrap() - one.sigma.unwrap()).abs() < 1e-12);
    }
}
