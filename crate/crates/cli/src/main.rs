//! `sidegate` command-line interface.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sidegate::encoder::SideMode;
use sidegate::phantom::Split;

use commands::{Ablation, ExplainRequest, Run};
use config::RunConfig;

/// Invalid input: bad flags, configuration, missing files or unknown ids.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "sidegate", version, about = "Side-information gated CVAE, NetVLAD classifier and LRP explanations on phantom volumes")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root directory.
    #[arg(long, global = true, env = "SIDEGATE_OUTPUT_ROOT")]
    out: Option<PathBuf>,
    /// Global seed, applied to every module.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Subdirectory of the output root for this run.
    #[arg(long, global = true)]
    name: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum SideArg {
    Mask,
    Bypass,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with train/validation/test splits.
    Generate {
        /// Number of volumes, overriding the config
        #[arg(long)]
        num_volumes: Option<usize>,
    },
    /// Train the gated CVAE on the training split.
    TrainCvae {
        /// Dataset directory written by `generate`
        #[arg(long)]
        dataset: PathBuf,
        /// Use `bypass` for the CVAE without side information.
        #[arg(long, value_enum)]
        side_mode: Option<SideArg>,
        /// Training epochs, overriding the config
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the volume classifier, optionally transferring a CVAE encoder.
    TrainClassifier {
        /// Dataset directory written by `generate`
        #[arg(long)]
        dataset: PathBuf,
        /// CVAE checkpoint whose encoder initialises the classifier
        #[arg(long)]
        cvae: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        ablation: Ablation,
        /// Training epochs, overriding the config
        #[arg(long)]
        epochs: Option<usize>,
        /// Learning rate, overriding the config
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a split and write metrics JSON, predictions and a ROC plot.
    Evaluate {
        /// Classifier checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `generate`
        #[arg(long)]
        dataset: PathBuf,
        /// train, validation or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Relevance heatmaps for one volume.
    Explain {
        /// Classifier checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `generate`
        #[arg(long)]
        dataset: PathBuf,
        /// Volume to explain, e.g. vol00012
        #[arg(long)]
        volume_id: String,
        /// Class whose score is explained (0 negative, 1 positive)
        #[arg(long, default_value_t = 1)]
        class: u8,
        /// Gaussian smoothing of the heatmaps.
        #[arg(long)]
        smooth: bool,
        /// Show negative relevance too.
        #[arg(long)]
        signed: bool,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn default_name(command: &Command) -> String {
    match command {
        Command::Generate { .. } => "dataset".into(),
        Command::TrainCvae { side_mode, .. } => match side_mode {
            Some(SideArg::Bypass) => "cvae-no-side".into(),
            _ => "cvae".into(),
        },
        Command::TrainClassifier { ablation, .. } => match ablation {
            Ablation::Full => "classifier-full".into(),
            Ablation::NoSide => "classifier-no-side".into(),
            Ablation::NoCvae => "classifier-no-cvae".into(),
        },
        Command::Evaluate { split, .. } => format!("eval-{split}"),
        Command::Explain { volume_id, class, .. } => format!("explain-{volume_id}-class{class}"),
        Command::ShowConfig => String::new(),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(config.seed);
    config = config.with_seed(seed);
    match &cli.command {
        Command::Generate { num_volumes: Some(n) } => config.phantom.generator.num_volumes = *n,
        Command::TrainCvae { side_mode, epochs, .. } => {
            if let Some(mode) = side_mode {
                config.cvae.model.side_mode = match mode {
                    SideArg::Mask => SideMode::Mask,
                    SideArg::Bypass => SideMode::Bypass,
                };
            }
            if let Some(e) = epochs {
                config.cvae.train.epochs = *e;
            }
        }
        Command::TrainClassifier { epochs, lr, .. } => {
            if let Some(e) = epochs {
                config.classifier.train.epochs = *e;
            }
            if let Some(lr) = lr {
                config.classifier.train.lr = *lr;
            }
        }
        _ => {}
    }
    config.validate()?;
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let root = cli.out.clone().unwrap_or_else(|| config.output_dir.clone());
    let dir = root.join(cli.name.clone().unwrap_or_else(|| default_name(&cli.command)));
    let label = match &cli.command {
        Command::Generate { .. } => "generate",
        Command::TrainCvae { .. } => "train-cvae",
        Command::TrainClassifier { .. } => "train-classifier",
        Command::Evaluate { .. } => "evaluate",
        Command::Explain { .. } => "explain",
        Command::ShowConfig => unreachable!("handled above"),
    };
    let session = Run::start(label, config, dir)?;
    let written = match cli.command {
        Command::Generate { .. } => commands::generate(session)?,
        Command::TrainCvae { dataset, .. } => commands::train_cvae_cmd(session, &dataset)?,
        Command::TrainClassifier { dataset, cvae, ablation, .. } => {
            commands::train_classifier_cmd(session, &dataset, cvae.as_deref(), ablation)?
        }
        Command::Evaluate { checkpoint, dataset, split } => {
            let split: Split = split.parse().map_err(|e: sidegate::Error| UsageError(e.to_string()))?;
            commands::evaluate_cmd(session, &checkpoint, &dataset, split)?
        }
        Command::Explain {
            checkpoint,
            dataset,
            volume_id,
            class,
            smooth,
            signed,
        } => commands::explain_cmd(
            session,
            ExplainRequest {
                checkpoint: &checkpoint,
                dataset: &dataset,
                volume_id: &volume_id,
                class_index: class,
                smooth,
                signed,
            },
        )?,
        Command::ShowConfig => unreachable!("handled above"),
    };
    println!("{}", written.display());
    Ok(())
}

/// 1 for invalid input, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<sidegate::Error>() {
            return match e {
                sidegate::Error::Validation(_) | sidegate::Error::ShapeMismatch { .. } | sidegate::Error::Checkpoint(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
