mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{config_error, ClassifierKind, ConfigError, ExperimentConfig, LandmarkSource};

const EXIT_DATA: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

/// Landmark shape models and subject identification from 3D face data.
#[derive(Parser, Debug)]
#[command(name = "faceid", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags are applied on top of the config file.
#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    model_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fraction of each sequence used for training.
    #[arg(long, global = true)]
    train_fraction: Option<f64>,
    /// Comma-separated subset of svm,rf,lstm.
    #[arg(long, global = true, value_delimiter = ',')]
    classifiers: Option<Vec<String>>,
    /// Classify ground-truth landmarks instead of fitted ones.
    #[arg(long, global = true)]
    ground_truth: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic population.
    Synth {
        /// Write landmarks only.
        #[arg(long)]
        no_meshes: bool,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the shape model on the training frames.
    TrainTdsm {
        #[arg(long)]
        variance_retained: Option<f64>,
    },
    /// Detect landmarks on meshes.
    Fit {
        /// Mesh files (.obj or xyz); defaults to the meshes in the manifest.
        #[arg(long = "mesh")]
        meshes: Vec<PathBuf>,
        /// Output CSV; defaults to fitted.csv in the data dir.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Thread each sequence's fit through the previous frame.
        #[arg(long)]
        temporal: bool,
    },
    /// Train classifiers and report identification accuracy.
    Identify,
    /// Identification accuracy per face quadrant.
    Occlusion,
    /// Print the effective configuration.
    Config,
}

fn effective_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(p) = &g.data_dir {
        cfg.paths.data_dir = p.clone();
    }
    if let Some(p) = &g.model_dir {
        cfg.paths.model_dir = p.clone();
    }
    if let Some(p) = &g.report_dir {
        cfg.paths.report_dir = p.clone();
    }
    if let Some(f) = g.train_fraction {
        cfg.classify.train_fraction = f;
    }
    if let Some(list) = &g.classifiers {
        cfg.classify.classifiers = list
            .iter()
            .map(|s| ClassifierKind::parse(s).ok_or_else(|| config_error(format!("unknown classifier {s:?}"))))
            .collect::<anyhow::Result<_>>()?;
    }
    if g.ground_truth {
        cfg.classify.source = LandmarkSource::GroundTruth;
    }
    match &cli.command {
        Command::Synth { subjects, sequences, frames, .. } => {
            if let Some(n) = subjects {
                cfg.population.num_subjects = *n;
            }
            if let Some(n) = sequences {
                cfg.population.sequences_per_subject = *n;
            }
            if let Some(n) = frames {
                cfg.population.frames_per_sequence = *n;
            }
        }
        Command::TrainTdsm { variance_retained: Some(v) } => cfg.tdsm.variance_retained = *v,
        Command::Fit { temporal: true, .. } => cfg.tdsm.temporal = true,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = effective_config(&cli)?;
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(config_error("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config_error(e.to_string()))?;
    }
    match cli.command {
        Command::Synth { no_meshes, .. } => commands::synth(&cfg, &commands::SynthArgs { meshes: !no_meshes }),
        Command::TrainTdsm { .. } => commands::train_tdsm(&cfg),
        Command::Fit { meshes, output, .. } => commands::fit_meshes(&cfg, &commands::FitArgs { meshes, output }),
        Command::Identify => commands::identify(&cfg),
        Command::Occlusion => commands::occlusion(&cfg),
        Command::Config => commands::show_config(&cfg, &mut std::io::stdout()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use faceid::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidMatrix(_) | E::ConvergenceFailure { .. } | E::DegenerateAlignment(_) => EXIT_NUMERIC,
                E::InvalidHyperparameter(_) | E::InvalidQuadrantSpec(_) | E::TableTooLarge { .. } => EXIT_CONFIG,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
