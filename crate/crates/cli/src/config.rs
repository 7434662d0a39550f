use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::TimeDelta;
use medlog::collector::CollectorConfig;
use medlog::store::RetentionPolicy;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Table,
    Json,
}

/// Settings from the config file, environment and flags, in increasing
/// precedence.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub endpoint: String,
    pub data_dir: PathBuf,
    pub policy: Option<PathBuf>,
    pub format: Format,
    pub listen: SocketAddr,
    pub orphan_ttl_hours: i64,
    pub upgrade_window_secs: i64,
    pub tick_interval_secs: u64,
    pub summary_ttl_days: i64,
    pub content_ttl_days: i64,
    pub artifact_ttl_days: i64,
    pub spool_max_bytes: Option<u64>,
    pub timeout_secs: u64,
}

impl Default for CliConfig {
    fn default() -> Self {
        let r = RetentionPolicy::default();
        let c = CollectorConfig::default();
        CliConfig {
            endpoint: "http://127.0.0.1:8077".into(),
            data_dir: PathBuf::from("medlog-data"),
            policy: None,
            format: Format::Table,
            listen: "127.0.0.1:8077".parse().expect("valid address"),
            orphan_ttl_hours: c.orphan_ttl.num_hours(),
            upgrade_window_secs: c.upgrade_window.num_seconds(),
            tick_interval_secs: 10,
            summary_ttl_days: r.tier_summary_ttl.num_days(),
            content_ttl_days: r.tier_content_ttl.num_days(),
            artifact_ttl_days: r.tier_artifact_ttl.num_days(),
            spool_max_bytes: None,
            timeout_secs: 10,
        }
    }
}

/// Environment variables and the settings they override.
pub const ENV_VARS: [&str; 13] = [
    "MEDLOG_ENDPOINT",
    "MEDLOG_DATA_DIR",
    "MEDLOG_POLICY",
    "MEDLOG_FORMAT",
    "MEDLOG_LISTEN",
    "MEDLOG_ORPHAN_TTL_HOURS",
    "MEDLOG_UPGRADE_WINDOW_SECS",
    "MEDLOG_TICK_INTERVAL_SECS",
    "MEDLOG_SUMMARY_TTL_DAYS",
    "MEDLOG_CONTENT_TTL_DAYS",
    "MEDLOG_ARTIFACT_TTL_DAYS",
    "MEDLOG_SPOOL_MAX_BYTES",
    "MEDLOG_TIMEOUT_SECS",
];

fn parse<T: std::str::FromStr>(var: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow::anyhow!("{var}={v:?}: {e}"))
}

impl CliConfig {
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => CliConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        for var in ENV_VARS {
            let Some(v) = get(var) else { continue };
            match var {
                "MEDLOG_ENDPOINT" => self.endpoint = v,
                "MEDLOG_DATA_DIR" => self.data_dir = v.into(),
                "MEDLOG_POLICY" => self.policy = Some(v.into()),
                "MEDLOG_FORMAT" => {
                    self.format = match v.as_str() {
                        "table" => Format::Table,
                        "json" => Format::Json,
                        _ => bail!("{var}={v:?}: expected table or json"),
                    }
                }
                "MEDLOG_LISTEN" => self.listen = parse(var, &v)?,
                "MEDLOG_ORPHAN_TTL_HOURS" => self.orphan_ttl_hours = parse(var, &v)?,
                "MEDLOG_UPGRADE_WINDOW_SECS" => self.upgrade_window_secs = parse(var, &v)?,
                "MEDLOG_TICK_INTERVAL_SECS" => self.tick_interval_secs = parse(var, &v)?,
                "MEDLOG_SUMMARY_TTL_DAYS" => self.summary_ttl_days = parse(var, &v)?,
                "MEDLOG_CONTENT_TTL_DAYS" => self.content_ttl_days = parse(var, &v)?,
                "MEDLOG_ARTIFACT_TTL_DAYS" => self.artifact_ttl_days = parse(var, &v)?,
                "MEDLOG_SPOOL_MAX_BYTES" => self.spool_max_bytes = Some(parse(var, &v)?),
                "MEDLOG_TIMEOUT_SECS" => self.timeout_secs = parse(var, &v)?,
                _ => unreachable!("listed above"),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self
            .endpoint
            .strip_prefix("http://")
            .is_some_and(|rest| !rest.is_empty() && !rest.contains(char::is_whitespace));
        if !ok {
            bail!("endpoint {:?} must be an http:// URL", self.endpoint);
        }
        if self.orphan_ttl_hours <= 0 || self.upgrade_window_secs < 0 || self.tick_interval_secs == 0 {
            bail!("orphan_ttl_hours and tick_interval_secs must be positive, upgrade_window_secs non-negative");
        }
        self.retention().validate()?;
        Ok(())
    }

    pub fn retention(&self) -> RetentionPolicy {
        RetentionPolicy {
            tier_summary_ttl: TimeDelta::days(self.summary_ttl_days),
            tier_content_ttl: TimeDelta::days(self.content_ttl_days),
            tier_artifact_ttl: TimeDelta::days(self.artifact_ttl_days),
        }
    }

    pub fn collector(&self) -> CollectorConfig {
        CollectorConfig {
            orphan_ttl: TimeDelta::hours(self.orphan_ttl_hours),
            upgrade_window: TimeDelta::seconds(self.upgrade_window_secs),
        }
    }

    pub fn store_dir(&self) -> PathBuf {
        self.data_dir.join("store")
    }

    pub fn spool_dir(&self) -> PathBuf {
        self.data_dir.join("spool")
    }
}
