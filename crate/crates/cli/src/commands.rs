use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use medlog::collector::Collector;
use medlog::drift::{run_scenario, BinSpec, DriftConfig, DriftMonitor, LdhScenario, Quarter};
use medlog::policy::CapturePolicy;
use medlog::spool::{Backoff, EnqueueOptions, Spool, SpoolConfig, SyncReport};
use medlog::store::{RecordView, ScanFilter, Store, StoreConfig, StoreError};
use medlog::{Fragment, FragmentKind, SystemClock, Timestamp, SPEC_VERSION};
use medlog_http::{run_until_signal, Client, ServerConfig};
use serde::Serialize;

use crate::config::{CliConfig, Format};
use crate::{render, DriftCommand, EmitArgs, ListArgs, QueryCommand, ReportArgs, ServeArgs, SyncArgs};

fn print<T: Serialize>(cfg: &CliConfig, value: &T, table: impl FnOnce(&T) -> String) -> Result<()> {
    match cfg.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value)?),
        Format::Table => print!("{}", table(value)),
    }
    Ok(())
}

fn client(cfg: &CliConfig) -> Client {
    Client::new(&cfg.endpoint, Duration::from_secs(cfg.timeout_secs))
}

fn open_spool(cfg: &CliConfig) -> Result<Spool> {
    let config = SpoolConfig {
        max_bytes: cfg.spool_max_bytes,
        ..SpoolConfig::default()
    };
    Spool::open(cfg.spool_dir(), config).with_context(|| format!("opening spool at {}", cfg.spool_dir().display()))
}

fn load_policy(path: Option<&Path>) -> Result<CapturePolicy> {
    match path {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            CapturePolicy::from_json(&bytes).with_context(|| format!("policy {}", p.display()))
        }
        None => Ok(CapturePolicy::default()),
    }
}

pub fn serve(cfg: &CliConfig, args: ServeArgs) -> Result<ExitCode> {
    let policy = load_policy(args.policy.as_deref().or(cfg.policy.as_deref()))?;
    let store = Store::open(cfg.store_dir(), StoreConfig::default())
        .with_context(|| format!("opening store at {}", cfg.store_dir().display()))?;
    let collector = Collector::new(store, policy, Arc::new(SystemClock), cfg.collector())?;
    let server = ServerConfig {
        tick_interval: Duration::from_secs(cfg.tick_interval_secs),
        ..ServerConfig::default()
    };
    run_until_signal(Arc::new(collector), args.listen.unwrap_or(cfg.listen), server)?;
    Ok(ExitCode::SUCCESS)
}

fn build_fragment(args: &EmitArgs, kind: FragmentKind) -> Result<Fragment> {
    let bytes = match (&args.file, &args.payload) {
        (Some(path), _) => std::fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(payload)) => {
            let payload: serde_json::Value = serde_json::from_str(payload).context("--payload is not JSON")?;
            let event_id = args.event_id.as_deref().expect("clap requires event_id");
            let sequence = match (kind, args.sequence) {
                (_, Some(s)) => s,
                (FragmentKind::Start, None) => 0,
                (_, None) => bail!("--sequence is required for {} fragments", kind.as_str()),
            };
            let fragment_id = args
                .fragment_id
                .clone()
                .unwrap_or_else(|| format!("{event_id}/{}/{sequence}", kind.as_str()));
            let env = serde_json::json!({
                "spec_version": SPEC_VERSION,
                "event_id": event_id,
                "fragment_id": fragment_id,
                "fragment_kind": kind.as_str(),
                "sequence": sequence,
                "emitted_at": Timestamp::now(),
                "payload": payload,
            });
            serde_json::to_vec(&env)?
        }
        (None, None) => bail!("one of --file or --payload is required"),
    };
    let frag = Fragment::decode(&bytes).map_err(|e| anyhow!("{}", e.messages().join("; ")))?;
    if frag.kind() != kind {
        bail!("fragment is a {} but {} was requested", frag.kind().as_str(), kind.as_str());
    }
    Ok(frag)
}

pub fn emit(cfg: &CliConfig, args: EmitArgs) -> Result<ExitCode> {
    let kind = FragmentKind::parse(&args.kind)
        .ok_or_else(|| anyhow!("unknown kind {:?}; expected start, artifact, output, outcome or feedback", args.kind))?;
    let frag = build_fragment(&args, kind)?;
    let spool = open_spool(cfg)?;
    let position = spool.enqueue(
        frag.envelope().clone(),
        EnqueueOptions {
            start_elsewhere: args.start_elsewhere,
        },
    )?;
    eprintln!("spooled {} at position {position}", frag.fragment_id());
    if args.offline {
        return Ok(ExitCode::SUCCESS);
    }
    let backoff = Backoff {
        max_passes: 3,
        ..Backoff::default()
    };
    finish_sync(cfg, spool.sync(&client(cfg), 64, backoff)?)
}

fn finish_sync(cfg: &CliConfig, report: SyncReport) -> Result<ExitCode> {
    print(cfg, &report, render::sync)?;
    if report.remaining > 0 {
        eprintln!("{} entries still in the spool; run `medlog sync` once the collector is reachable", report.remaining);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn sync(cfg: &CliConfig, args: &SyncArgs) -> Result<ExitCode> {
    if args.batch_size == 0 || args.max_passes == 0 {
        bail!("--batch-size and --max-passes must be positive");
    }
    let spool = open_spool(cfg)?;
    let backoff = Backoff {
        max_passes: args.max_passes,
        ..Backoff::default()
    };
    let report = spool.sync(&client(cfg), args.batch_size, backoff)?;
    spool.compact()?;
    finish_sync(cfg, report)
}

pub fn validate(_cfg: &CliConfig, file: &Path) -> Result<ExitCode> {
    let bytes = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    match Fragment::decode(&bytes) {
        Ok(f) => {
            println!("ok: {} fragment {} of event {}", f.kind().as_str(), f.fragment_id(), f.event_id());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            for m in e.messages() {
                println!("invalid: {m}");
            }
            Ok(ExitCode::from(1))
        }
    }
}

fn list_filter(args: &ListArgs) -> Result<ScanFilter> {
    let mut pairs: Vec<(&str, String)> = Vec::new();
    let opts = [
        ("model_id", &args.model_id),
        ("run_id", &args.run_id),
        ("from", &args.from),
        ("to", &args.to),
        ("status", &args.status),
        ("conformance", &args.conformance),
    ];
    for (k, v) in opts {
        if let Some(v) = v {
            pairs.push((k, v.clone()));
        }
    }
    if let Some(n) = args.page_size {
        pairs.push(("page_size", n.to_string()));
    }
    Ok(ScanFilter::from_pairs(pairs)?)
}

pub fn query(cfg: &CliConfig, q: QueryCommand) -> Result<ExitCode> {
    let client = client(cfg);
    match q {
        QueryCommand::Record { event_id } => print(cfg, &client.record(&event_id)?, render::record)?,
        QueryCommand::Run { run_id } => print(cfg, &client.run(&run_id)?, render::run)?,
        QueryCommand::List(args) => {
            let views = client.query_all(&list_filter(&args)?)?;
            print(cfg, &views, |v| render::records(v))?
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn compact(cfg: &CliConfig, now: Option<&str>) -> Result<ExitCode> {
    let now = match now {
        Some(s) => Timestamp::parse(s).map_err(|e| anyhow!("--now: {e}"))?,
        None => Timestamp::now(),
    };
    let store = match Store::open(cfg.store_dir(), StoreConfig::default()) {
        Err(StoreError::Locked) => bail!("store {} is in use; stop the collector before compacting", cfg.store_dir().display()),
        other => other.with_context(|| format!("opening store at {}", cfg.store_dir().display()))?,
    };
    let report = store.compact(now, &cfg.retention())?;
    print(cfg, &report, render::compaction)?;
    Ok(ExitCode::SUCCESS)
}

fn drift_report(cfg: &CliConfig, args: &ReportArgs) -> Result<ExitCode> {
    if args.bins == 0 {
        bail!("--bins must be positive");
    }
    let filter = ScanFilter {
        model_id: args.model_id.clone(),
        ..ScanFilter::default()
    };
    let views = client(cfg).query_all(&filter)?;
    let points: Vec<(f64, Timestamp)> = views
        .iter()
        .filter_map(RecordView::record)
        .filter_map(|r| {
            let x = *r.inputs.features.as_ref()?.get(&args.feature)?;
            Some((x, r.header.invoked_at))
        })
        .collect();
    let Some(earliest) = points.iter().map(|(_, at)| Quarter::of(*at)).min() else {
        bail!("no full records carry feature {:?}", args.feature);
    };
    let reference = match &args.reference {
        Some(s) => s.parse::<Quarter>().map_err(|e| anyhow!("--reference: {e}"))?,
        None => earliest,
    };
    let reference_values: Vec<f64> = points
        .iter()
        .filter(|(x, at)| Quarter::of(*at) == reference && x.is_finite())
        .map(|(x, _)| *x)
        .collect();
    let bins = BinSpec::covering(&reference_values, args.bins)
        .with_context(|| format!("no usable values for {:?} in {reference}", args.feature))?;
    let mut monitor = DriftMonitor::new(DriftConfig::new(reference, bins))?;
    for (x, at) in &points {
        monitor.observe(&args.feature, *x, *at);
    }
    let reports = monitor.report(&args.feature)?;
    print(cfg, &reports, |r| render::drift(r))?;
    Ok(ExitCode::SUCCESS)
}

pub fn drift(cfg: &CliConfig, d: DriftCommand) -> Result<ExitCode> {
    match d {
        DriftCommand::Report(args) => drift_report(cfg, &args),
        DriftCommand::Simulate { scenario } => {
            let bytes = std::fs::read(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let s = LdhScenario::from_json(&bytes)?;
            let outcome = run_scenario::<f64>(&s)?;
            print(cfg, &outcome, render::scenario)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
