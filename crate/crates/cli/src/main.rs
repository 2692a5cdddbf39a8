//! `scene`: world generation, pretraining, training, evaluation and
//! inspection from one binary.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scene_core::agent::AgentKind;
use scene_core::env::Level;
use scene_core::imagery::ImageSourceKind;

#[derive(Parser, Debug)]
#[command(name = "scene", version, about = "Multimodal agents for text-based house-cleanup games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON config file (or a previous run's manifest.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolChoice {
    Master,
    Train,
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    In,
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CacheAction {
    Stats,
    Clear,
    Warm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceChoice {
    Generator,
    Retrieval,
    None,
}

impl From<SourceChoice> for ImageSourceKind {
    fn from(s: SourceChoice) -> Self {
        match s {
            SourceChoice::Generator => ImageSourceKind::Generator,
            SourceChoice::Retrieval => ImageSourceKind::Retrieval,
            SourceChoice::None => ImageSourceKind::None,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate worlds as JSON files.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        difficulty: Option<Level>,
        #[arg(long)]
        count: Option<usize>,
        /// Entity pool to draw from.
        #[arg(long, value_enum, default_value = "master")]
        pool: PoolChoice,
    },
    /// Pretrain the text-to-image generator and warm-start the image encoder.
    PretrainGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        encoder_epochs: Option<usize>,
    },
    /// Train an agent on generated or given worlds.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        agent: Option<AgentKind>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        step_cap: Option<u32>,
        #[arg(long)]
        difficulty: Option<Level>,
        #[arg(long, value_enum)]
        image_source: Option<SourceChoice>,
        /// Keep the generator frozen during training.
        #[arg(long)]
        no_finetune: bool,
        /// Directory of world JSON files; generated from the seed otherwise.
        #[arg(long)]
        worlds: Option<PathBuf>,
        /// Pretrained assets from `pretrain-gen`; pretrained in-process otherwise.
        #[arg(long)]
        assets: Option<PathBuf>,
        /// Image corpus for the retrieval source.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or the random agent) and write a metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the random baseline instead of a checkpoint.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_enum, default_value = "out")]
        split: SplitChoice,
        #[arg(long)]
        difficulty: Option<Level>,
        #[arg(long)]
        step_cap: Option<u32>,
        #[arg(long)]
        worlds: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Tabulate metrics reports and plot training curves.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Metrics report JSON files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Training curve CSV files; repeatable.
        #[arg(long = "curve")]
        curves: Vec<PathBuf>,
    },
    /// Inspect or fill the image cache.
    Cache {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        action: CacheAction,
        /// Query file for `warm`, one query per line.
        query_file: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Grad-CAM panels for greedy steps of a trained agent.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// World JSON file; generated from the seed otherwise.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Print the phrases extracted from text, one per line.
    Phrases {
        #[command(flatten)]
        common: Common,
        /// Text to analyse; read from stdin when absent.
        text: Option<String>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Serve the environment protocol on stdin/stdout.
    ServeEnv {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
