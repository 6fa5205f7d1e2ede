use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

use config::{Command, Resolved, Settings};

#[derive(Parser)]
#[command(name = "relpatch", version, about = "Activation patching experiments for LLM relevance judgment")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Opts {
    /// JSON file with any of the settings below; flags and RELPATCH_* variables win
    #[arg(long, env = "RELPATCH_CONFIG")]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the planted-circuit model, its tokenizer and a synthetic dataset
    Fixture(Opts),
    /// Sample (query, positive, BM25 negative) triplets
    BuildData(Opts),
    /// Patching sweeps: layer x position, layer x head, or attention-score grids
    Trace(Opts),
    /// Interaction scores, head unembedding, correlations and RBO from saved grids
    Heads(Opts),
    /// Judgment and reranking metrics under head knockout plans
    Eval(Opts),
    /// Yes/no relevance judgments and their F1
    Judge(Opts),
    /// Pointwise or pairwise reranking of a first-stage run
    Rerank(Opts),
}

fn run(cli: Cli) -> Result<()> {
    let (cmd, opts) = match cli.command {
        Cmd::Fixture(o) => (Command::Fixture, o),
        Cmd::BuildData(o) => (Command::BuildData, o),
        Cmd::Trace(o) => (Command::Trace, o),
        Cmd::Heads(o) => (Command::Heads, o),
        Cmd::Eval(o) => (Command::Eval, o),
        Cmd::Judge(o) => (Command::Judge, o),
        Cmd::Rerank(o) => (Command::Rerank, o),
    };
    let settings = opts.settings.with_file(opts.config.as_deref()).context("invalid configuration")?;
    let cfg = Resolved::new(cmd, &settings).context("invalid configuration")?;
    log::info!("{} config_hash={}", cmd.name(), cfg.hash());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .context("starting the thread pool")?;
    pool.install(|| {
        match cmd {
            Command::Fixture => commands::fixture(&cfg),
            Command::BuildData => commands::build_data(&cfg),
            Command::Trace => commands::trace(&cfg),
            Command::Heads => commands::heads(&cfg),
            Command::Eval => commands::eval(&cfg),
            Command::Judge => commands::judge(&cfg),
            Command::Rerank => commands::rerank(&cfg),
        }
        .with_context(|| format!("{} failed", cmd.name()))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
