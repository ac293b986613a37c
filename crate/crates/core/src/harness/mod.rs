//! Seeded end-to-end experiment pipeline: target → prior → denoiser →
//! sampling → evaluation → bound diagnostics → report.

mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    BoundConfig, InitConfig, InitFamily, MetricsConfig, RunConfig, SamplerConfig, SamplerKind,
    ScheduleConfig, ScoreSource, TargetConfig, TargetKind,
};
pub use report::{emit_report, read_samples_csv, write_samples_csv, MetricSummary, Summary};

use crate::denoiser::{train_denoiser, DenoiserNet};
use crate::error::{Error, Result};
use crate::flow::{train_flow, FlowMode, FlowModel};
use crate::ht_prior::HtPriorSpec;
use crate::kl_diag::{diagnose_bound, BoundReport};
use crate::metrics::{evaluate, MetricReport};
use crate::rng;
use crate::schedule::{em_sample, heun_sample};
use crate::score::{IsoGaussian, LogDensity, ScoreModel};
use crate::targets::{forward_noise, make_random_gmm, GmmSpec, HtSpec, Provenance, SampleBatch};

/// Ground-truth distribution of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Gmm(GmmSpec),
    Ht(HtSpec),
}

impl Target {
    pub fn from_config(cfg: &TargetConfig) -> Result<Self> {
        match cfg.kind {
            TargetKind::Gmm => Ok(Target::Gmm(make_random_gmm(cfg.dim, cfg.seed)?)),
            TargetKind::Ht => Ok(Target::Ht(HtSpec::new(cfg.dim, cfg.dof)?)),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleBatch> {
        match self {
            Target::Gmm(g) => g.sample(n, rng),
            Target::Ht(h) => h.sample(n, rng),
        }
    }

    pub fn gmm(&self) -> Option<&GmmSpec> {
        match self {
            Target::Gmm(g) => Some(g),
            Target::Ht(_) => None,
        }
    }

    pub fn to_json(&self) -> String {
        match self {
            Target::Gmm(g) => g.to_json(),
            Target::Ht(h) => h.to_json(),
        }
    }
}

/// Initialization law of the reverse process.
#[derive(Clone, Debug)]
pub enum Prior {
    PiInf { sigma: f64, dim: usize },
    Empirical { data: Array2<f64>, sigma: f64 },
    Flow(FlowModel),
    Ht(HtPriorSpec),
}

impl Prior {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleBatch> {
        match self {
            Prior::PiInf { sigma, dim } => {
                let d = *dim;
                let data = Array2::from_shape_fn((n, d), |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    sigma * z
                });
                SampleBatch::new(data, Provenance::Prior, Some(*sigma))
            }
            Prior::Empirical { data, sigma } => {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.nrows())).collect();
                let clean = SampleBatch::new(data.select(Axis(0), &idx), Provenance::Target, None)?;
                let mut noised = forward_noise(&clean, *sigma, rng)?;
                noised.provenance = Provenance::Prior;
                Ok(noised)
            }
            Prior::Flow(f) => f.sample(n, rng),
            Prior::Ht(h) => h.sample(n, rng),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::PiInf { dim, .. } => *dim,
            Prior::Empirical { data, .. } => data.ncols(),
            Prior::Flow(f) => f.dim(),
            Prior::Ht(h) => h.dim(),
        }
    }

    /// Log-density, where one is available in closed form.
    pub fn density(&self) -> Option<Box<dyn LogDensity + '_>> {
        match self {
            Prior::PiInf { sigma, .. } => Some(Box::new(IsoGaussian { sigma: *sigma })),
            Prior::Flow(f) => Some(Box::new(f)),
            _ => None,
        }
    }
}

/// `ν̂`, `μ̂` and `k` of a fitted heavy-tail prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSummary {
    pub nu: f64,
    pub mu: Vec<f64>,
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    /// Artifact file name → SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
    pub reports: Vec<MetricReport>,
    pub bound: Option<BoundReport>,
    pub prior: Option<PriorSummary>,
    pub stage_seconds: Vec<(String, f64)>,
}

/// Loaded or trained components shared by the CLI subcommands.
pub struct Pipeline {
    pub config: RunConfig,
    pub target: Target,
    pub train_set: SampleBatch,
    artifacts: BTreeMap<String, String>,
    timings: Vec<(String, f64)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn staged<T>(stage: &'static str, timings: &mut Vec<(String, f64)>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    timings.push((stage.to_string(), start.elapsed().as_secs_f64()));
    Ok(out)
}

impl Pipeline {
    /// Resolves the config, builds the target and draws the training set.
    pub fn new(config: &RunConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
        let mut timings = Vec::new();
        let (target, train_set) = staged("target", &mut timings, || {
            let target = Target::from_config(&config.target)?;
            let mut r = rng::stream(config.seed, "target-train");
            let train = target.sample(config.target.n_train, &mut r)?;
            Ok((target, train))
        })?;
        let mut pipeline = Self {
            config,
            target,
            train_set,
            artifacts: BTreeMap::new(),
            timings,
        };
        pipeline.save_artifact("target.json", pipeline.target.to_json().as_bytes())?;
        pipeline.save_artifact("config.toml", pipeline.config.to_toml().as_bytes())?;
        Ok(pipeline)
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.output_dir
    }

    fn save_artifact(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.config.output_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Loads, fits or trains the initialization law.
    pub fn prior(&mut self) -> Result<Prior> {
        let cfg = self.config.clone();
        let sigma_t = cfg.schedule.sigma_t;
        let start = Instant::now();
        let result = (|| -> Result<Prior> {
            Ok(match cfg.init.family {
                InitFamily::PiInf => Prior::PiInf {
                    sigma: sigma_t,
                    dim: cfg.target.dim,
                },
                InitFamily::Empirical => Prior::Empirical {
                    data: self.train_set.data.clone(),
                    sigma: sigma_t,
                },
                InitFamily::FlowFixed | InitFamily::FlowDynamical => {
                    let flow = match &cfg.init.checkpoint {
                        Some(path) if path.exists() => {
                            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                            FlowModel::from_text(&text)?
                        }
                        missing if !cfg.init.train => {
                            let what = missing
                                .as_ref()
                                .map(|p| p.display().to_string())
                                .unwrap_or_else(|| "no checkpoint given".into());
                            return Err(Error::Stage {
                                stage: "prior-missing",
                                source: Box::new(Error::Model(format!(
                                    "flow prior unavailable ({what}) and training is disabled"
                                ))),
                            });
                        }
                        _ => {
                            let mode = if cfg.init.family == InitFamily::FlowFixed {
                                FlowMode::Fixed
                            } else {
                                FlowMode::Dynamical
                            };
                            train_flow(&self.train_set, sigma_t, &cfg.flow, mode)?.0
                        }
                    };
                    self.save_artifact("flow.txt", flow.to_text().as_bytes())?;
                    Prior::Flow(flow)
                }
                InitFamily::HtPrior => {
                    let spec = HtPriorSpec::fit(&self.train_set, sigma_t, &cfg.hill)?;
                    let json = serde_json::to_string_pretty(&spec).expect("prior serializes");
                    self.save_artifact("ht_prior.json", json.as_bytes())?;
                    Prior::Ht(spec)
                }
            })
        })()
        .map_err(|e| e.in_stage("prior"))?;
        self.timings.push(("prior".into(), start.elapsed().as_secs_f64()));
        Ok(result)
    }

    /// Loads or trains the denoiser.
    pub fn denoiser(&mut self) -> Result<DenoiserNet> {
        let start = Instant::now();
        let cfg = self.config.clone();
        let net = (|| -> Result<DenoiserNet> {
            let net = match &cfg.sampler.checkpoint {
                Some(path) if path.exists() => {
                    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    DenoiserNet::from_text(&text)?
                }
                _ => train_denoiser(&self.train_set, &cfg.denoiser)?.0,
            };
            self.save_artifact("denoiser.txt", net.to_text().as_bytes())?;
            Ok(net)
        })()
        .map_err(|e| e.in_stage("denoiser"))?;
        self.timings.push(("denoiser".into(), start.elapsed().as_secs_f64()));
        Ok(net)
    }

    /// Draws `n` initial points and runs the configured sampler.
    pub fn generate(&self, prior: &Prior, score: &dyn ScoreModel, n: usize, seed: u64) -> Result<SampleBatch> {
        let schedule = self.config.schedule.schedule()?;
        let mut r = rng::stream(seed, "generate");
        let init = prior.sample(n, &mut r)?;
        match self.config.sampler.kind {
            SamplerKind::Heun => heun_sample(score, &init, &schedule.karras_sigmas()?),
            SamplerKind::Em => em_sample(score, &init, &schedule.stochastic_sigmas()?, &mut r),
        }
    }

    fn repetition_seed(&self, r: usize) -> u64 {
        rng::derive_seed(self.config.seed, &format!("repetition-{r}"))
    }

    /// Generation and evaluation for every repetition.
    pub fn evaluate_all(&mut self, prior: &Prior, score: &dyn ScoreModel) -> Result<Vec<MetricReport>> {
        let start = Instant::now();
        let protocol = self.config.metrics.protocol();
        let m = &self.config.metrics;
        let mut reports = Vec::with_capacity(m.repetitions);
        for r in 0..m.repetitions {
            let seed = self.repetition_seed(r);
            let generated = self.generate(prior, score, m.n_generate, seed).map_err(|e| e.in_stage("sample"))?;
            let reference = self
                .target
                .sample(m.n_reference, &mut rng::stream(seed, "reference"))
                .map_err(|e| e.in_stage("evaluate"))?;
            let report = evaluate(generated.view(), reference.view(), &protocol, seed)
                .map_err(|e| e.in_stage("evaluate"))?;
            reports.push(report);
        }
        self.timings.push(("sample+evaluate".into(), start.elapsed().as_secs_f64()));
        Ok(reports)
    }

    /// Bound diagnostics; `None` unless the target is a mixture and the prior
    /// has a density.
    pub fn bound(&mut self, prior: &Prior, model: Option<&dyn ScoreModel>) -> Result<Option<BoundReport>> {
        let Some(gmm) = self.target.gmm() else {
            return Ok(None);
        };
        let Some(density) = prior.density() else {
            return Ok(None);
        };
        let start = Instant::now();
        let schedule = self.config.schedule.schedule()?;
        let mut r = rng::stream(self.config.seed, "bound");
        let report = diagnose_bound(gmm, density.as_ref(), model, &schedule, self.config.bound.n, &mut r)
            .map_err(|e| e.in_stage("bound"))?;
        self.timings.push(("bound".into(), start.elapsed().as_secs_f64()));
        Ok(Some(report))
    }

    pub fn into_record(
        self,
        reports: Vec<MetricReport>,
        bound: Option<BoundReport>,
        prior: &Prior,
    ) -> RunRecord {
        let prior = match prior {
            Prior::Ht(h) => Some(PriorSummary {
                nu: h.dof(),
                mu: h.location.to_vec(),
                k: h.hill_k,
            }),
            _ => None,
        };
        RunRecord {
            config: self.config,
            artifacts: self.artifacts,
            reports,
            bound,
            prior,
            stage_seconds: self.timings,
        }
    }
}

/// Score model selected by the config, borrowing the target or a denoiser.
pub enum Score {
    Analytic(GmmSpec),
    Denoiser(DenoiserNet),
}

impl Score {
    pub fn as_model(&self) -> &dyn ScoreModel {
        match self {
            Score::Analytic(g) => g,
            Score::Denoiser(d) => d,
        }
    }
}

pub fn build_score(pipeline: &mut Pipeline) -> Result<Score> {
    match pipeline.config.sampler.score {
        ScoreSource::Analytic => match &pipeline.target {
            Target::Gmm(g) => Ok(Score::Analytic(g.clone())),
            Target::Ht(_) => Err(Error::config("the ht target has no analytic score").in_stage("denoiser")),
        },
        ScoreSource::Denoiser => Ok(Score::Denoiser(pipeline.denoiser()?)),
    }
}

/// Runs every stage and persists artifacts under the output directory.
pub fn run_experiment(config: &RunConfig) -> Result<RunRecord> {
    let mut pipeline = Pipeline::new(config)?;
    let prior = pipeline.prior()?;
    let score = build_score(&mut pipeline)?;
    let reports = pipeline.evaluate_all(&prior, score.as_model())?;
    let bound = if pipeline.config.bound.enabled {
        let model = match &score {
            Score::Denoiser(d) => Some(d as &dyn ScoreModel),
            Score::Analytic(_) => None,
        };
        pipeline.bound(&prior, model)?
    } else {
        None
    };
    Ok(pipeline.into_record(reports, bound, &prior))
}
