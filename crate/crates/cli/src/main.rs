use std::path::PathBuf;
use std::process::ExitCode;

use attnpair::config::PipelineConfig;
use attnpair::pipeline::{self, StageOutcome};
use attnpair::Error;
use clap::{Parser, Subcommand};

/// Build attention-mined multi-image preference pairs and train a toy model on them.
#[derive(Parser)]
#[command(name = "attnpair", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    image_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Exit with code 3 when a stage produced empty-result warnings.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Compose multi-image prompts from the single-image corpus.
    Augment,
    /// Generate candidates and compute attention ratios.
    Mine,
    /// Pick rejected answers and apply the post-selection filters.
    Select,
    /// DPO training on the kept pairs.
    Train,
    /// Ratio histograms, drop report and training curve.
    Report,
    /// All stages in order.
    Pipeline,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::FileUnreadable { .. } => 2,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> attnpair::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(root) = &cli.image_root {
        cfg.image_root = Some(root.clone());
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> attnpair::Result<StageOutcome> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Augment => pipeline::cmd_augment(&cfg),
        Command::Mine => pipeline::cmd_mine(&cfg),
        Command::Select => pipeline::cmd_select(&cfg),
        Command::Train => pipeline::cmd_train(&cfg),
        Command::Report => pipeline::cmd_report(&cfg),
        Command::Pipeline => pipeline::cmd_pipeline(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for m in &outcome.messages {
                println!("{m}");
            }
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            if cli.strict && !outcome.warnings.is_empty() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
