//! `medlog`: run the collector, emit and sync fragments, query records,
//! compact storage and report on feature drift.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{CliConfig, Format};

#[derive(Parser, Debug)]
#[command(name = "medlog", version, about = "Event-level logging for clinical AI models")]
struct Cli {
    /// TOML config file. MEDLOG_* environment variables override it.
    #[arg(long, global = true, env = "MEDLOG_CONFIG")]
    config: Option<PathBuf>,
    /// Collector base URL.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Directory holding the store and the spool.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the collector.
    Serve(ServeArgs),
    /// Spool one fragment and deliver it unless --offline.
    Emit(EmitArgs),
    /// Deliver everything waiting in the spool.
    Sync(SyncArgs),
    /// Check a fragment file without sending it.
    Validate {
        file: PathBuf,
    },
    /// Read records from the collector.
    #[command(subcommand)]
    Query(QueryCommand),
    /// Apply retention to the local store. The collector must be stopped.
    Compact {
        /// Evaluate expiry as of this RFC 3339 instant instead of now.
        #[arg(long)]
        now: Option<String>,
    },
    /// Input feature drift.
    #[command(subcommand)]
    Drift(DriftCommand),
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub listen: Option<std::net::SocketAddr>,
    /// Capture policy document (JSON).
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmitArgs {
    /// Fragment kind: start, artifact, output, outcome or feedback.
    pub kind: String,
    /// A complete fragment envelope (JSON).
    #[arg(long, conflicts_with = "payload")]
    pub file: Option<PathBuf>,
    /// Inline payload JSON; the envelope is built from the flags below.
    #[arg(long, requires = "event_id")]
    pub payload: Option<String>,
    #[arg(long)]
    pub event_id: Option<String>,
    #[arg(long)]
    pub fragment_id: Option<String>,
    #[arg(long)]
    pub sequence: Option<u64>,
    /// Only write to the spool.
    #[arg(long)]
    pub offline: bool,
    /// The event's start is emitted elsewhere.
    #[arg(long)]
    pub start_elsewhere: bool,
}

#[derive(Args, Debug)]
pub struct SyncArgs {
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub max_passes: u32,
}

#[derive(Subcommand, Debug)]
pub enum QueryCommand {
    /// One record by event id.
    Record { event_id: String },
    /// A run tree and its records.
    Run { run_id: String },
    /// Records matching filters, all pages.
    List(ListArgs),
}

#[derive(Args, Debug)]
pub struct ListArgs {
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub from: Option<String>,
    #[arg(long)]
    pub to: Option<String>,
    #[arg(long)]
    pub status: Option<String>,
    #[arg(long)]
    pub conformance: Option<String>,
    #[arg(long)]
    pub page_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum DriftCommand {
    /// Windowed psi/ks table for one input feature from collected records.
    Report(ReportArgs),
    /// Run a synthetic drift scenario end to end.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub feature: String,
    /// Reference window, e.g. 2018Q1. Defaults to the earliest window.
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub model_id: Option<String>,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if let Some(e) = cli.endpoint {
        cfg.endpoint = e;
    }
    if let Some(d) = cli.data_dir {
        cfg.data_dir = d;
    }
    if let Some(f) = cli.format {
        cfg.format = f;
    }
    cfg.validate()?;
    match cli.command {
        Command::Serve(a) => commands::serve(&cfg, a),
        Command::Emit(a) => commands::emit(&cfg, a),
        Command::Sync(a) => commands::sync(&cfg, &a),
        Command::Validate { file } => commands::validate(&cfg, &file),
        Command::Query(q) => commands::query(&cfg, q),
        Command::Compact { now } => commands::compact(&cfg, now.as_deref()),
        Command::Drift(d) => commands::drift(&cfg, d),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("MEDLOG_LOG").unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
