//! `visir` command-line entry point.

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use visir::benchmark::ReportFormat;

use crate::commands::EmbedTarget;
use crate::config::{BackendKind, Overrides, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "visir", version, about = "Screenshot retrieval pipelines: corpus, mining, training, benchmark")]
struct Cli {
    /// Sectioned TOML config; `VISIR__SECTION__KEY` variables override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker cap (train defaults to 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Output directory for artifacts and the echoed run_config.toml.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Records,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => ReportFormat::Table,
            Format::Records => ReportFormat::Records,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus file and write it back in canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Apply the aspect-ratio, caption-length and keyword filters.
    Filter {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Mine hard negatives for every q2s and sq2s sample.
    Mine {
        #[arg(long)]
        corpus: PathBuf,
        /// Also mine a partner screenshot for each screenshot.
        #[arg(long)]
        pairs: bool,
    },
    /// Two-stage contrastive training of the linear dual encoder.
    Train {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Embed screenshots or captions into an embedding file.
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "screenshots")]
        what: EmbedTarget,
    },
    /// Validate an embedding file as an index and optionally query it.
    Index {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        query: Option<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Build task corpora: gold candidates, random fill, judged hard negatives.
    BenchBuild {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Reviewed verdicts applied as an additional judge.
        #[arg(long)]
        reviews: Option<PathBuf>,
        #[arg(long)]
        target_size: Option<usize>,
    },
    /// Evaluate Recall@k for every task and aggregate.
    BenchEval {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Re-aggregate a record-mode report.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Plan a visual-token-budget resize.
    Resize {
        #[arg(long)]
        h: u64,
        #[arg(long)]
        w: u64,
        #[arg(long)]
        max_tokens: Option<u64>,
    },
}

impl Command {
    fn writes_artifacts(&self) -> bool {
        !matches!(self, Command::Report { .. } | Command::Resize { .. } | Command::Index { .. })
    }
}

fn init_threads(cfg: &RunConfig, command: &Command) -> Result<(), CliError> {
    let threads = match (cfg.run.threads, command) {
        (0, Command::Train { .. }) => 1,
        (n, _) => n,
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(())
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn run(cli: Cli) -> Result<String, CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        backend: cli.backend,
    };
    let mut cfg = config::load(cli.config.as_deref(), std::env::vars(), &overrides)?;
    match &cli.command {
        Command::BenchBuild {
            target_size: Some(n), ..
        } => cfg.bench.target_size = *n,
        Command::BenchEval { k: Some(k), .. } => cfg.bench.k = *k,
        Command::Resize {
            max_tokens: Some(m), ..
        } => cfg.resize.max_tokens = *m,
        _ => {}
    }
    if cfg.bench.k == 0 {
        return Err(CliError::config("bench.k must be at least 1"));
    }
    init_threads(&cfg, &cli.command)?;

    let started = unix_now();
    let out = if cli.command.writes_artifacts() {
        let dir = commands::out_dir(cli.out.as_ref())?;
        commands::write(&dir.join("run_config.toml"), cfg.echo().as_bytes())?;
        Some(dir)
    } else {
        cli.out.as_deref()
    };
    let artifact_dir = || out.expect("artifact commands have an output directory");

    let text = match &cli.command {
        Command::Ingest { input } => commands::ingest(input, artifact_dir())?,
        Command::Filter { corpus } => commands::filter(&cfg, corpus, artifact_dir())?,
        Command::Mine { corpus, pairs } => commands::mine(&cfg, corpus, *pairs, artifact_dir())?,
        Command::Train { corpus } => commands::train_cmd(&cfg, corpus, artifact_dir())?,
        Command::Embed { corpus, what } => commands::embed(&cfg, corpus, *what, artifact_dir())?,
        Command::Index { embeddings, query, k } => {
            if let Some(dir) = out {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
                commands::write(&dir.join("run_config.toml"), cfg.echo().as_bytes())?;
            }
            commands::index(&cfg, embeddings, query.as_deref(), *k, out)?
        }
        Command::BenchBuild {
            tasks, corpus, reviews, ..
        } => commands::bench_build(&cfg, tasks, corpus, reviews.as_deref(), artifact_dir())?,
        Command::BenchEval { tasks, corpus, .. } => commands::bench_eval(&cfg, tasks, corpus, artifact_dir())?,
        Command::Report { records, format } => commands::report(records, (*format).into())?,
        Command::Resize { h, w, .. } => commands::resize(*h, *w, cfg.resize.max_tokens)?,
    };
    if let Some(dir) = out.filter(|_| cli.command.writes_artifacts()) {
        write_sidecar(dir, started)?;
    }
    Ok(text)
}

/// Wall-clock information lives only here, so that every other artifact is
/// reproducible byte for byte.
fn write_sidecar(dir: &Path, started: f64) -> Result<(), CliError> {
    let finished = unix_now();
    let log = format!(
        "started_unix={started:.3}\nfinished_unix={finished:.3}\nelapsed_secs={:.3}\n",
        finished - started
    );
    commands::write(&dir.join("run.log"), log.as_bytes())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}
