use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiseTrainConfig;
use crate::error::{Error, Result};
use crate::flow::FlowTrainConfig;
use crate::ht_prior::HillConfig;
use crate::metrics::{MaxSwConfig, MetricProtocol, Order};
use crate::rng;
use crate::schedule::SigmaSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Gmm,
    Ht,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: TargetKind,
    pub dim: usize,
    /// Seed of the random mixture itself (ignored for `ht`).
    pub seed: u64,
    /// Degrees of freedom of the heavy-tailed target.
    pub dof: f64,
    pub n_train: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            kind: TargetKind::Gmm,
            dim: 4,
            seed: 0,
            dof: 3.0,
            n_train: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub sigma_t: f64,
    pub steps: usize,
    pub rho: f64,
    pub sigma_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sigma_t: 2.0,
            steps: 10,
            rho: 7.0,
            sigma_min: 0.002,
        }
    }
}

impl ScheduleConfig {
    pub fn schedule(&self) -> Result<SigmaSchedule> {
        SigmaSchedule::new(self.sigma_t, self.sigma_min, self.steps, self.rho)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitFamily {
    /// `N(0, σ_T² I)`.
    PiInf,
    /// Noised resample of the training set.
    Empirical,
    FlowFixed,
    FlowDynamical,
    HtPrior,
}

impl InitFamily {
    pub fn name(self) -> &'static str {
        match self {
            InitFamily::PiInf => "pi-inf",
            InitFamily::Empirical => "empirical",
            InitFamily::FlowFixed => "flow-fixed",
            InitFamily::FlowDynamical => "flow-dynamical",
            InitFamily::HtPrior => "ht-prior",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            InitFamily::PiInf,
            InitFamily::Empirical,
            InitFamily::FlowFixed,
            InitFamily::FlowDynamical,
            InitFamily::HtPrior,
        ]
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| Error::config(format!("unknown initialization `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub family: InitFamily,
    /// Existing flow checkpoint to load instead of training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Whether a missing learned prior may be trained in this run.
    pub train: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            family: InitFamily::PiInf,
            checkpoint: None,
            train: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Heun,
    Em,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    /// Closed-form score of the mixture target.
    Analytic,
    Denoiser,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub score: ScoreSource,
    /// Existing denoiser checkpoint to load instead of training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Heun,
            score: ScoreSource::Analytic,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub repetitions: usize,
    pub n_generate: usize,
    pub n_reference: usize,
    pub n_slices: usize,
    pub order: Order,
    pub quantiles: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance_samples: Option<usize>,
    pub max_sw: MaxSwConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let p = MetricProtocol::default();
        Self {
            repetitions: 5,
            n_generate: 10_000,
            n_reference: 10_000,
            n_slices: p.n_slices,
            order: p.order,
            quantiles: p.quantiles,
            distance_samples: p.distance_samples,
            max_sw: p.max_sw,
        }
    }
}

impl MetricsConfig {
    pub fn protocol(&self) -> MetricProtocol {
        MetricProtocol {
            n_slices: self.n_slices,
            order: self.order,
            max_sw: self.max_sw,
            quantiles: self.quantiles.clone(),
            distance_samples: self.distance_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub enabled: bool,
    pub n: usize,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n: 100_000,
        }
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub target: TargetConfig,
    pub schedule: ScheduleConfig,
    pub init: InitConfig,
    pub sampler: SamplerConfig,
    pub flow: FlowTrainConfig,
    pub denoiser: DenoiseTrainConfig,
    pub hill: HillConfig,
    pub metrics: MetricsConfig,
    pub bound: BoundConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            target: TargetConfig::default(),
            schedule: ScheduleConfig::default(),
            init: InitConfig::default(),
            sampler: SamplerConfig::default(),
            flow: FlowTrainConfig::default(),
            denoiser: DenoiseTrainConfig {
                hidden_width: 64,
                ..DenoiseTrainConfig::default()
            },
            hill: HillConfig::default(),
            metrics: MetricsConfig::default(),
            bound: BoundConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fills stage seeds and the denoiser σ range from the run-level fields.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.flow.seed = rng::derive_seed(self.seed, "prior");
        cfg.denoiser.seed = rng::derive_seed(self.seed, "denoiser");
        cfg.metrics.max_sw.seed = rng::derive_seed(self.seed, "max-sw");
        cfg.denoiser.sigma_min = self.schedule.sigma_min;
        cfg.denoiser.sigma_max = self.schedule.sigma_t;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.schedule()?;
        if self.target.dim < 2 {
            return Err(Error::config("target dimension must be at least 2"));
        }
        if self.target.n_train < 2 {
            return Err(Error::config("training set needs at least two points"));
        }
        if self.metrics.n_generate == 0 || self.metrics.n_reference == 0 {
            return Err(Error::config("sample sizes must be positive"));
        }
        if self.sampler.score == ScoreSource::Analytic && self.target.kind != TargetKind::Gmm {
            return Err(Error::config("an analytic score is only available for the gmm target"));
        }
        if self.init.family == InitFamily::HtPrior && self.target.kind != TargetKind::Ht {
            return Err(Error::config("ht-prior initialization needs the ht target"));
        }
        if self.metrics.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(Error::config("quantile levels must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_byte_identical() {
        let mut cfg = RunConfig::default().resolved();
        cfg.init.checkpoint = Some(PathBuf::from("flows/a.txt"));
        cfg.metrics.quantiles = vec![0.1, 0.99, 0.999999];
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[target]\nkind = \"ht\"\ndim = 10\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.target.kind, TargetKind::Ht);
        assert_eq!(cfg.target.n_train, 100_000);
        assert_eq!(cfg.schedule, ScheduleConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1\n").is_err());
        assert!(RunConfig::from_toml("[init]\nfamily = \"flow\"\n").is_err());
    }

    #[test]
    fn incompatible_choices_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.target.kind = TargetKind::Ht;
        assert!(cfg.validate().is_err());
        cfg.sampler.score = ScoreSource::Denoiser;
        assert!(cfg.validate().is_ok());
        cfg.target.kind = TargetKind::Gmm;
        cfg.init.family = InitFamily::HtPrior;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn family_names_parse_back() {
        for f in ["pi-inf", "empirical", "flow-fixed", "flow-dynamical", "ht-prior"] {
            assert_eq!(InitFamily::parse(f).unwrap().name(), f);
        }
        assert!(InitFamily::parse("flow").is_err());
    }
}
