use std::io::BufRead;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use concept_search::annotate::{validate_all, Status, ValidationReport};
use concept_search::embed::ProviderConfig;
use concept_search::eval::{read_benchmark, run_benchmark, Metric};
use concept_search::index::{load_corpus, Engine, Index, SearchOptions};
use concept_search::query::{DELTA_CLUSTER, DELTA_HIGHLIGHT};
use concept_search::train::check;
use concept_search_cli::{render, server};

#[derive(Parser)]
#[command(name = "concept-search", version, about = "Explainable code search")]
struct Cli {
    /// Provider config (TOML). Defaults to $CONCEPT_SEARCH_CONFIG, then the
    /// built-in hash embedder.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a corpus directory or JSONL file into an index.
    Index {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explained search over an index.
    Search {
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value_t = DELTA_HIGHLIGHT)]
        delta_highlight: f64,
        #[arg(long, default_value_t = DELTA_CLUSTER)]
        delta_cluster: f64,
        #[arg(long)]
        json: bool,
    },
    /// Run a benchmark file against an index.
    Eval {
        index: PathBuf,
        benchmark: PathBuf,
        #[arg(long, default_value = "all")]
        metric: Metric,
        #[arg(long)]
        json: bool,
    },
    /// Validate an annotation file; exits 1 if any record fails.
    ValidateAnnotations {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Verify the training losses and gradients; exits 1 on any breach.
    LossCheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
    },
    /// Serve the HTTP API.
    Serve {
        index: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn engine(config: Option<&Path>) -> Result<Arc<Engine>> {
    let cfg = ProviderConfig::resolve(config).context("loading provider config")?;
    Ok(Arc::new(Engine::from_config(&cfg)?))
}

fn open(dir: &Path, config: Option<&Path>) -> Result<Index> {
    Index::open(dir, engine(config)?).with_context(|| format!("opening index {}", dir.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Index { corpus, out } => {
            let (items, notes) = load_corpus(&corpus)?;
            for n in &notes {
                eprintln!("note: {n}");
            }
            let index = Index::open_or_create(&out, engine(config)?)?;
            let stats = index.ingest(&items)?;
            for (id, reason) in &stats.skipped {
                eprintln!("skipped {id}: {reason}");
            }
            println!(
                "ingested {} ({} replaced, {} skipped, {} tokens); index holds {} entries",
                stats.ingested,
                stats.replaced,
                stats.skipped.len(),
                stats.total_tokens,
                stats.entries
            );
        }
        Command::Search {
            index,
            query,
            top_k,
            delta_highlight,
            delta_cluster,
            json,
        } => {
            let index = open(&index, config)?;
            let opts = SearchOptions {
                top_k,
                delta_highlight,
                delta_cluster,
            };
            let resp = index.search(&query, &opts)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&resp)?);
            } else {
                print!("{}", render::search(&query, &resp));
            }
        }
        Command::Eval {
            index,
            benchmark,
            metric,
            json,
        } => {
            let index = open(&index, config)?;
            let file = std::fs::File::open(&benchmark).with_context(|| format!("reading {}", benchmark.display()))?;
            let queries = read_benchmark(std::io::BufReader::new(file))?;
            let report = run_benchmark(&index, &queries, metric)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", render::benchmark(&report));
            }
        }
        Command::ValidateAnnotations { file, json } => {
            let f = std::fs::File::open(&file).with_context(|| format!("reading {}", file.display()))?;
            let records: Vec<String> = std::io::BufReader::new(f)
                .lines()
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|l| !l.trim().is_empty())
                .collect();
            let report = ValidationReport::from_outcomes(validate_all(&records));
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", render::validation(&report));
            }
            if report.count(Status::Pass) != report.total {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::LossCheck { cases, seed } => {
            let rows = check::run_all(cases, seed)?;
            print!("{}", render::checks(&rows));
            if rows.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Serve { index, port, host } => {
            let index = Arc::new(Index::open_or_create(&index, engine(config)?)?);
            let addr: SocketAddr = format!("{host}:{port}").parse().context("parsing listen address")?;
            tokio::runtime::Runtime::new()?.block_on(server::serve(index, addr))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
