use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use energyscape::pipeline::{exit_code, Pipeline, PipelineConfig, Stage};
use energyscape::synth::{write_cohort, SyntheticCohortSpec};
use energyscape::{Error, Result};

/// Energy-landscape analysis of multichannel time series.
///
/// Exit codes: 0 success, 2 invalid input or configuration, 3 every model fit
/// rejected, 4 a stage's required intermediate is missing, 1 other failures.
#[derive(Parser)]
#[command(name = "energyscape", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage: cluster, binarize, fit, landscape, stats, classify.
    Run(PipelineArgs),
    /// k-means clustering with elbow selection of k, per subject.
    Cluster(PipelineArgs),
    /// Mean-threshold binarization of cluster and network signals.
    Binarize(PipelineArgs),
    /// Fit pairwise maximum-entropy models to the binary states.
    Fit(PipelineArgs),
    /// Energy series, extrema, envelopes and feature vectors.
    Landscape(PipelineArgs),
    /// Mann-Whitney group tests over the cohort feature table.
    Stats(PipelineArgs),
    /// Random forests with repeated leave-one-out evaluation.
    Classify(PipelineArgs),
    /// Write a synthetic two-group cohort and a matching pipeline config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Subject manifest; overrides the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Global seed [config default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [config default: energyscape-out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Channel-to-network atlas; enables the four network feature sets.
    #[arg(long)]
    atlas: Option<PathBuf>,
    /// Fraction of timepoints in the top and bottom extreme sets [default: 0.2].
    #[arg(long)]
    fraction: Option<f64>,
    /// Envelope smoothing window, odd [default: 5].
    #[arg(long)]
    window: Option<usize>,
    /// Cross-validation repetitions [default: 30].
    #[arg(long)]
    reps: Option<usize>,
}

impl PipelineArgs {
    /// Config file values overridden by any flags given.
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(a) = &self.atlas {
            cfg.atlas = Some(a.clone());
        }
        if let Some(f) = self.fraction {
            cfg.landscape.fraction = f;
        }
        if let Some(w) = self.window {
            cfg.landscape.window = w;
        }
        if let Some(r) = self.reps {
            cfg.forest.n_repetitions = r;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Destination directory.
    #[arg(long)]
    out: PathBuf,
    /// Cohort spec (TOML with the SyntheticCohortSpec fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Subjects per group [default: 10].
    #[arg(long)]
    subjects: Option<usize>,
    /// Binary units in the generating model [default: 6].
    #[arg(long)]
    units: Option<usize>,
    /// Timepoints per subject [default: 200].
    #[arg(long)]
    length: Option<usize>,
    /// Coupling scale-up of the low group minus one [default: 0.8].
    #[arg(long)]
    effect: Option<f64>,
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {}", p.display(), e.message())))?
        }
        None => SyntheticCohortSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.subjects {
        spec.n_subjects_per_group = n;
    }
    if let Some(n) = args.units {
        spec.n_units = n;
    }
    if let Some(t) = args.length {
        spec.series_length = t;
    }
    if let Some(g) = args.effect {
        spec.group_effect = g;
    }
    let files = write_cohort(&args.out, &spec)?;
    let cfg = PipelineConfig {
        manifest: Some("manifest.csv".into()),
        atlas: Some("atlas.csv".into()),
        out: "results".into(),
        seed: spec.seed,
        ..PipelineConfig::default()
    };
    energyscape::report::write_file(&args.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    println!("wrote {} subjects to {}", files.series.len(), args.out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let (stage, args) = match &cli.command {
        Command::Synth(a) => return synth(a),
        Command::Run(a) => (None, a),
        Command::Cluster(a) => (Some(Stage::Cluster), a),
        Command::Binarize(a) => (Some(Stage::Binarize), a),
        Command::Fit(a) => (Some(Stage::Fit), a),
        Command::Landscape(a) => (Some(Stage::Landscape), a),
        Command::Stats(a) => (Some(Stage::Stats), a),
        Command::Classify(a) => (Some(Stage::Classify), a),
    };
    let pipeline = Pipeline::open(args.resolve()?)?;
    match stage {
        Some(s) => pipeline.run_stage(s),
        None => {
            let summary = pipeline.run_all()?;
            println!(
                "{} subjects, {} accepted fits, {} rejected; results in {}",
                summary.n_subjects,
                summary.accepted_fits,
                summary.rejected_fits,
                pipeline.config().out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
