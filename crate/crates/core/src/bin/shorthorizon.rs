use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shorthorizon::harness::{
    build_score, emit_report, read_samples_csv, run_experiment, write_samples_csv, InitFamily,
    Pipeline, RunConfig, SamplerKind, TargetKind,
};
use shorthorizon::metrics::evaluate;
use shorthorizon::rng;
use shorthorizon::targets::Provenance;
use shorthorizon::{Error, Result};

/// Short-horizon diffusion sampling experiments.
#[derive(Parser)]
#[command(name = "shorthorizon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit or train the initialization law and save it to the output directory.
    TrainPrior(Common),
    /// Train a denoiser for the configured horizon.
    TrainDenoiser(Common),
    /// Generate samples and write them as CSV.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a CSV of generated samples against the target.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generated: PathBuf,
        /// Reference samples; fresh target draws when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Monte-Carlo estimates of the error-bound terms.
    DiagnoseBound(Common),
    /// Every stage end to end, writing metrics.csv and summary.json.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_parser = ["gmm", "ht"])]
    target: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    sigma_t: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = ["pi-inf", "empirical", "flow-fixed", "flow-dynamical", "ht-prior"])]
    init: Option<String>,
    #[arg(long, value_parser = ["heun", "em"])]
    sampler: Option<String>,
    #[arg(long)]
    repetitions: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Ok(dir) = std::env::var("SHORTHORIZON_OUTPUT_DIR") {
            cfg.output_dir = dir.into();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.target {
            cfg.target.kind = if v == "ht" { TargetKind::Ht } else { TargetKind::Gmm };
        }
        if let Some(v) = self.dim {
            cfg.target.dim = v;
        }
        if let Some(v) = self.sigma_t {
            cfg.schedule.sigma_t = v;
        }
        if let Some(v) = self.steps {
            cfg.schedule.steps = v;
        }
        if let Some(v) = &self.init {
            cfg.init.family = InitFamily::parse(v)?;
        }
        if let Some(v) = &self.sampler {
            cfg.sampler.kind = if v == "em" { SamplerKind::Em } else { SamplerKind::Heun };
        }
        if let Some(v) = self.repetitions {
            cfg.metrics.repetitions = v;
        }
        Ok(cfg)
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::TrainPrior(c) => {
            let mut p = Pipeline::new(&c.resolve()?)?;
            let prior = p.prior()?;
            println!("prior ready ({} dims) in {}", prior.dim(), p.output_dir().display());
        }
        Command::TrainDenoiser(c) => {
            let mut p = Pipeline::new(&c.resolve()?)?;
            p.denoiser()?;
            println!("denoiser written to {}", p.output_dir().join("denoiser.txt").display());
        }
        Command::Sample { common, n, out } => {
            let mut p = Pipeline::new(&common.resolve()?)?;
            let prior = p.prior()?;
            let score = build_score(&mut p)?;
            let seed = rng::derive_seed(p.config.seed, "cli-sample");
            let batch = p.generate(&prior, score.as_model(), n, seed)?;
            write_samples_csv(&out, &batch)?;
            println!("{} samples written to {}", batch.len(), out.display());
        }
        Command::Evaluate { common, generated, reference } => {
            let p = Pipeline::new(&common.resolve()?)?;
            let gen = read_samples_csv(&generated, Provenance::Generated)?;
            let reference = match reference {
                Some(path) => read_samples_csv(&path, Provenance::Target)?,
                None => p
                    .target
                    .sample(p.config.metrics.n_reference, &mut rng::stream(p.config.seed, "cli-reference"))?,
            };
            let report = evaluate(gen.view(), reference.view(), &p.config.metrics.protocol(), p.config.seed)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::DiagnoseBound(c) => {
            let mut p = Pipeline::new(&c.resolve()?)?;
            let prior = p.prior()?;
            let bound = p.bound(&prior, None)?.ok_or_else(|| {
                Error::config("bound diagnostics need the gmm target and a prior with a density")
            })?;
            println!("{}", serde_json::to_string_pretty(&bound).expect("bound serializes"));
        }
        Command::Run(c) => {
            let cfg = c.resolve()?;
            let record = run_experiment(&cfg)?;
            for path in emit_report(&record, &record.config.output_dir)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
