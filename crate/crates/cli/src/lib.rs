//! Command-line pipeline for the toy text-to-image experiments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
pub mod config;
pub mod manifest;
pub mod report;

pub use commands::{load_text_bundle, TextBundle};

/// Exit codes: 0 success, 2 usage, 3 I/O, 4 training failure, 5 incompatibility.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }
}

impl From<banglagan::Error> for CliError {
    fn from(e: banglagan::Error) -> Self {
        use banglagan::Error as E;
        let code = match &e {
            E::EmptyCaption | E::Mask { .. } | E::Batch(_) => 2,
            E::Io { .. } | E::Format { .. } | E::Dataset(_) | E::Encoding(_) => 3,
            E::Training { .. } | E::Numerics { .. } | E::Stats(_) | E::LinAlg(_) => 4,
            E::Incompatible(_) | E::Shape { .. } | E::Vocab { .. } => 5,
        };
        CliError { code, msg: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "banglagan", version, about = "Attentional text-to-image GAN on Bangla captions (toy scale)")]
#[command(after_help = config::Settings::help_text())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// Config file of `[section]` / `key = value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic colored-shape dataset with Bangla captions.
    Toygen {
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 240, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Image side in pixels.
        #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(8..=256))]
        size: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        captions: u64,
    },
    /// Pretrain the text and image encoders with the DAMSM loss.
    #[command(after_help = config::Settings::help_text())]
    TrainDamsm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides damsm.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides damsm.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the three-stage generator and discriminators against frozen encoders.
    #[command(after_help = config::Settings::help_text())]
    TrainGan {
        #[arg(long)]
        data: PathBuf,
        /// Output directory of train-damsm.
        #[arg(long)]
        damsm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides gan.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides gan.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the stand-in classifier used for FID features and IS posteriors.
    #[command(after_help = config::Settings::help_text())]
    TrainClassifier {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides metrics.classifier_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate image pyramids and attention reports for one caption.
    Generate {
        /// Output directory of train-gan.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// FID and Inception Score of generated test-caption images.
    #[command(after_help = config::Settings::help_text())]
    Evaluate {
        /// Output directory of train-gan.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory of train-classifier.
        #[arg(long)]
        classifier: PathBuf,
        /// Metrics JSON file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides metrics.n_samples.
        #[arg(long)]
        n_samples: Option<usize>,
        /// Overrides metrics.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Score the real test images against themselves instead of generating.
        #[arg(long)]
        identity: bool,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run(args: &[String]) -> CliResult<()> {
    let cli = Cli::try_parse_from(args).map_err(|e| {
        if !e.use_stderr() {
            return CliError { code: 0, msg: e.render().to_string() };
        }
        let mut msg = e.render().to_string();
        if !msg.contains("Usage:") {
            let mut root = <Cli as clap::CommandFactory>::command();
            root.build();
            let usage = match args.get(1).and_then(|name| root.find_subcommand_mut(name)) {
                Some(sub) => sub.render_usage(),
                None => root.render_usage(),
            };
            msg.push_str(&format!("\n{usage}\n"));
        }
        CliError::usage(msg)
    })?;
    commands::dispatch(cli.command, args)
}
