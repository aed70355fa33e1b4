use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use crossmlp_autograd::Scalar;
use crossmlp_data::{generate_toy_dataset, Manifest};
use crossmlp_train::run::load_options;
use crossmlp_train::{
    ablate, ablation_table, checkpoint_precision, evaluate, generate, train, AblationAxis, ClassifierSource, Precision,
    RunConfig, TrainState, SEED_ENV,
};

#[derive(Parser)]
#[command(name = "crossmlp", version, about = "Cross-view image translation with cascaded CrossMLP blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `#classes K` file with `<id>/real` and `<id>/fake` rows.
        #[arg(long, conflicts_with = "toy_classifier")]
        probs: Option<PathBuf>,
        /// Fit the centroid classifier on the ground truth instead.
        #[arg(long)]
        toy_classifier: bool,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
    /// Run one source / semantic pair through the generator.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per axis value.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["blocks", "loss"])]
        axis: String,
        /// Comma-separated subset of the axis values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long)]
        toy_classifier: bool,
    },
    /// Write a procedural paired dataset and its manifest.
    MakeToyData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let env = std::env::var(SEED_ENV).ok();
    RunConfig::load(path, env.as_deref()).with_context(|| format!("loading {}", path.display()))
}

fn classifier(probs: Option<PathBuf>, toy: bool) -> ClassifierSource {
    match (probs, toy) {
        (Some(p), _) => ClassifierSource::Probs(p),
        (None, true) => ClassifierSource::Toy,
        (None, false) => ClassifierSource::None,
    }
}

fn run_train<T: Scalar>(config: &RunConfig, resume: Option<&Path>) -> Result<()> {
    for w in config.loss.weights.warnings() {
        eprintln!("warning: {w}");
    }
    let summary = train::<T>(config, resume, |line| println!("{line}"))?;
    eprintln!("finished at step {}; wrote {}", summary.final_step, summary.final_checkpoint.display());
    Ok(())
}

fn run_eval<T: Scalar>(ckpt: &Path, manifest: &Path, source: &ClassifierSource, batch_size: usize) -> Result<()> {
    let state = TrainState::<T>::load(ckpt)?;
    let manifest = Manifest::load(manifest)?;
    let report = evaluate(&state.gan, &manifest, &load_options(&state.config), source, batch_size)?;
    print!("{report}");
    Ok(())
}

fn run_generate<T: Scalar>(ckpt: &Path, source: &Path, semantic: &Path, out: &Path) -> Result<()> {
    let state = TrainState::<T>::load(ckpt)?;
    for path in generate(&state.gan, source, semantic, out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run_ablate<T: Scalar>(
    config: &RunConfig,
    axis: AblationAxis,
    values: Option<&[String]>,
    source: &ClassifierSource,
) -> Result<()> {
    let rows = ablate::<T>(config, axis, values, source, |line| eprintln!("{line}"))?;
    print!("{}", ablation_table(&rows));
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, resume } => {
            let config = load_config(&config)?;
            match config.train.precision {
                Precision::F32 => run_train::<f32>(&config, resume.as_deref()),
                Precision::F64 => run_train::<f64>(&config, resume.as_deref()),
            }
        }
        Command::Eval { ckpt, manifest, probs, toy_classifier, batch_size } => {
            let source = classifier(probs, toy_classifier);
            match checkpoint_precision(&ckpt)? {
                Precision::F32 => run_eval::<f32>(&ckpt, &manifest, &source, batch_size),
                Precision::F64 => run_eval::<f64>(&ckpt, &manifest, &source, batch_size),
            }
        }
        Command::Generate { ckpt, source, semantic, out } => match checkpoint_precision(&ckpt)? {
            Precision::F32 => run_generate::<f32>(&ckpt, &source, &semantic, &out),
            Precision::F64 => run_generate::<f64>(&ckpt, &source, &semantic, &out),
        },
        Command::Ablate { config, axis, values, toy_classifier } => {
            let config = load_config(&config)?;
            let axis = AblationAxis::parse(&axis)?;
            let source = classifier(None, toy_classifier);
            match config.train.precision {
                Precision::F32 => run_ablate::<f32>(&config, axis, values.as_deref(), &source),
                Precision::F64 => run_ablate::<f64>(&config, axis, values.as_deref(), &source),
            }
        }
        Command::MakeToyData { n, size, seed, out, classes } => {
            let m = generate_toy_dataset(&out, n, size, classes, seed)?;
            println!("wrote {} samples to {}", m.len(), out.join(crossmlp_data::TOY_MANIFEST).display());
            Ok(())
        }
    }
}
