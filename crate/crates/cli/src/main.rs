//! `zner`: ingest, embed, index, search and evaluate entity-keyed passages.
//!
//! Exit codes: 0 success, 2 configuration or input validation error,
//! 3 runtime data error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "zner", version, about = "Entity-keyed multi-vector passage retrieval")]
struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true, default_value = "zner.toml")]
    config: PathBuf,

    #[command(flatten)]
    overrides: OverrideArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct OverrideArgs {
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Conditioning mode: entity-in-context, entity-alone or full-span.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Key sampler: full, random or max-idf.
    #[arg(long, global = true)]
    sampler: Option<String>,
    /// Output directory.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate the corpus and annotations, write the key and query manifests.
    Ingest,
    /// Embed keys and queries with the deterministic mock embedder.
    EmbedMock,
    /// Check key coverage and build the BM25 sidecar.
    Index,
    /// Retrieve passages for one question.
    Search(SearchArgs),
    /// Recall@k of the dense run, BM25 and any extra runs.
    Eval,
    /// Recall over the sampler by conditioning-mode grid.
    Ablate,
    /// Recall per IDF_ent bucket.
    Buckets,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Question id from the query manifest.
    #[arg(long, conflicts_with = "question", required_unless_present = "question")]
    pub qid: Option<String>,
    /// Free question text, embedded on the fly.
    #[arg(long)]
    pub question: Option<String>,
    /// Relation whose template extracts the entity from `--question`.
    #[arg(long, requires = "question")]
    pub relation: Option<String>,
    #[arg(short, long)]
    pub k: Option<usize>,
    /// Run tag written to the TREC output.
    #[arg(long, default_value = "dense")]
    pub tag: String,
}

/// A user-facing failure carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ZNER_LOG", "warn")).init();
    let cli = Cli::parse();
    let o = cli.overrides;
    let overrides = Overrides {
        seed: o.seed,
        workers: o.workers,
        dim: o.dim,
        mode: o.mode,
        sampler: o.sampler,
        output: o.output,
    };
    let result = RunConfig::load(&cli.config, &overrides).and_then(|cfg| match cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::EmbedMock => commands::embed_mock(&cfg),
        Command::Index => commands::index(&cfg),
        Command::Search(args) => commands::search(&cfg, &args),
        Command::Eval => commands::eval(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::Buckets => commands::buckets(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
