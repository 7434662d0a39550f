//! Transport-agnostic collector: ingestion, reads, health and policy
//! administration over one store.
//!
//! Ingestion of one fragment runs validate → dedup check → assembly
//! preview → capture policy → durable append → fold, under a lock on the
//! fragment's event shard so fragments of one event are serialized while
//! different events proceed (and share fsyncs) concurrently.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::TimeDelta;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::assembly::{
    build_run_tree_from_headers, ApplyOutcome, AssemblyState, RunTree, RunTreeError, DEFAULT_ORPHAN_TTL,
};
use crate::policy::{
    decide, flags_upgrade, CaptureDecision, CapturePolicy, Capture, PolicyError, PolicyRule,
    UpgradeBuffer, DEFAULT_UPGRADE_WINDOW,
};
use crate::record::{Fragment, FragmentKind, Payload};
use crate::store::{stub_inline_bodies, Page, RecordView, ScanFilter, Store, StoreError, StoreStats};
use crate::time::Clock;

const SHARDS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestStatus {
    Accepted,
    Duplicate,
    Quarantined,
    Conflict,
    Invalid,
}

impl IngestStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            IngestStatus::Accepted => "accepted",
            IngestStatus::Duplicate => "duplicate",
            IngestStatus::Quarantined => "quarantined",
            IngestStatus::Conflict => "conflict",
            IngestStatus::Invalid => "invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub status: IngestStatus,
    #[serde(default)]
    pub event_id: String,
    #[serde(default)]
    pub fragment_id: String,
    /// Set when the fragment was accepted but not stored because of the
    /// capture decision.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dropped: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
}

impl IngestResponse {
    fn new(status: IngestStatus, event_id: &str, fragment_id: &str) -> Self {
        IngestResponse {
            status,
            event_id: event_id.to_owned(),
            fragment_id: fragment_id.to_owned(),
            dropped: false,
            violations: Vec::new(),
        }
    }
}

/// Failures of the service rather than of the fragment. Clients may
/// re-send the same fragment once the service recovers.
#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("collector is draining")]
    Draining,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, thiserror::Error)]
pub enum ReadError {
    #[error("{0} not found")]
    NotFound(String),
    #[error(transparent)]
    RunTree(#[from] RunTreeError),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for ReadError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => ReadError::NotFound(id),
            other => ReadError::Store(other),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CollectorConfig {
    pub orphan_ttl: TimeDelta,
    pub upgrade_window: TimeDelta,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            orphan_ttl: DEFAULT_ORPHAN_TTL,
            upgrade_window: DEFAULT_UPGRADE_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunView {
    pub tree: RunTree,
    pub records: Vec<RecordView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub healthy: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<String>,
    pub store_writable: bool,
    pub draining: bool,
    pub in_flight: usize,
    pub upgrade_buffer_depth: usize,
    pub orphan_count: usize,
    pub records: usize,
    pub store: StoreStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickReport {
    pub orphans_dead_lettered: usize,
    pub buffered_artifacts_discarded: usize,
}

#[derive(Debug, Clone)]
struct EventCapture {
    decision: CaptureDecision,
    rule: PolicyRule,
}

struct Shard {
    assembly: AssemblyState,
    captures: HashMap<String, EventCapture>,
    buffer: UpgradeBuffer,
}

pub struct Collector {
    store: Store,
    clock: Arc<dyn Clock>,
    policy: RwLock<Arc<CapturePolicy>>,
    shards: Vec<Mutex<Shard>>,
    draining: AtomicBool,
    in_flight: AtomicUsize,
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Best-effort ids from a body that failed to decode.
fn ids_of(body: &[u8]) -> (String, String) {
    let v: serde_json::Value = serde_json::from_slice(body).unwrap_or_default();
    let get = |k: &str| v.get(k).and_then(|s| s.as_str()).unwrap_or_default().to_owned();
    (get("event_id"), get("fragment_id"))
}

fn invalid(body: &[u8], violations: Vec<String>) -> IngestResponse {
    let (e, f) = ids_of(body);
    IngestResponse {
        violations,
        ..IngestResponse::new(IngestStatus::Invalid, &e, &f)
    }
}

impl Collector {
    /// Wrap an opened store, re-folding its live fragments and recomputing
    /// capture decisions under `policy`.
    pub fn new(
        store: Store,
        policy: CapturePolicy,
        clock: Arc<dyn Clock>,
        config: CollectorConfig,
    ) -> Result<Self, PolicyError> {
        policy.validate()?;
        let shards = (0..SHARDS)
            .map(|_| {
                Mutex::new(Shard {
                    assembly: AssemblyState::new(config.orphan_ttl),
                    captures: HashMap::new(),
                    buffer: UpgradeBuffer::new(config.upgrade_window),
                })
            })
            .collect();
        let c = Collector {
            store,
            clock,
            policy: RwLock::new(Arc::new(policy)),
            shards,
            draining: AtomicBool::new(false),
            in_flight: AtomicUsize::new(0),
        };
        c.recover()?;
        Ok(c)
    }

    fn recover(&self) -> Result<(), PolicyError> {
        let now = self.clock.now();
        let policy = self.policy();
        let live = self.store.live_fragments();
        for s in &live {
            let mut shard = self.shard(s.fragment.event_id()).lock();
            shard.assembly.apply(&s.fragment, now);
            if let Payload::Start(p) = &s.fragment.envelope().payload {
                let rule = policy.rule_for(&p.model.model_id)?.clone();
                let decision = decide(&rule, s.fragment.event_id());
                shard
                    .captures
                    .insert(s.fragment.event_id().to_owned(), EventCapture { decision, rule });
            }
        }
        // Upgrades depend only on which outputs were stored.
        for s in &live {
            if let Payload::Output(o) = &s.fragment.envelope().payload {
                let mut shard = self.shard(s.fragment.event_id()).lock();
                if let Some(cap) = shard.captures.get_mut(s.fragment.event_id()) {
                    if flags_upgrade(o, &cap.rule) {
                        cap.decision.decision = Capture::CaptureFull;
                    }
                }
            }
        }
        Ok(())
    }

    fn shard(&self, event_id: &str) -> &Mutex<Shard> {
        let mut h = DefaultHasher::new();
        event_id.hash(&mut h);
        &self.shards[h.finish() as usize % SHARDS]
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn policy(&self) -> Arc<CapturePolicy> {
        self.policy.read().clone()
    }

    /// Ingest one encoded fragment posted to the endpoint for `kind`.
    pub fn ingest(&self, kind: &str, body: &[u8]) -> Result<IngestResponse, IngestError> {
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        let _guard = InFlight(&self.in_flight);
        if self.draining.load(Ordering::SeqCst) {
            return Err(IngestError::Draining);
        }
        let Some(kind) = FragmentKind::parse(kind) else {
            return Ok(invalid(body, vec![format!("unknown fragment kind {kind:?}")]));
        };
        let frag = match Fragment::decode(body) {
            Ok(f) => f,
            Err(e) => return Ok(invalid(body, e.messages())),
        };
        if frag.kind() != kind {
            return Ok(IngestResponse {
                violations: vec![format!(
                    "fragment_kind: {} posted to the {} endpoint",
                    frag.kind(),
                    kind
                )],
                ..IngestResponse::new(IngestStatus::Invalid, frag.event_id(), frag.fragment_id())
            });
        }
        self.ingest_fragment(&frag)
    }

    /// Ingest an already decoded fragment.
    pub fn ingest_fragment(&self, frag: &Fragment) -> Result<IngestResponse, IngestError> {
        let respond = |status| IngestResponse::new(status, frag.event_id(), frag.fragment_id());
        let mut shard = self.shard(frag.event_id()).lock();
        let now = self.clock.now();

        if let Some(known) = self.store.lookup(frag.fragment_id()) {
            return Ok(respond(if known.hash == *frag.hash() {
                IngestStatus::Duplicate
            } else {
                IngestStatus::Conflict
            }));
        }
        match shard.assembly.preview(frag, now) {
            ApplyOutcome::Conflict { reason } => {
                return Ok(IngestResponse {
                    violations: vec![reason],
                    ..respond(IngestStatus::Conflict)
                })
            }
            ApplyOutcome::Duplicate => return Ok(respond(IngestStatus::Duplicate)),
            _ => {}
        }

        let capture = shard.captures.get(frag.event_id()).cloned();
        let mut stored = frag.clone();
        let mut released = Vec::new();
        match (&frag.envelope().payload, &capture) {
            (Payload::Start(p), _) => {
                let rule = match self.policy().rule_for(&p.model.model_id) {
                    Ok(r) => r.clone(),
                    Err(e) => {
                        return Ok(IngestResponse {
                            violations: vec![e.to_string()],
                            ..respond(IngestStatus::Invalid)
                        })
                    }
                };
                let decision = decide(&rule, frag.event_id());
                shard
                    .captures
                    .insert(frag.event_id().to_owned(), EventCapture { decision, rule });
            }
            (Payload::Artifact(_), Some(cap)) if cap.decision.decision != Capture::CaptureFull => {
                if cap.rule.flag_upgrades {
                    shard.buffer.hold(frag.clone(), now);
                }
                return Ok(IngestResponse {
                    dropped: true,
                    ..respond(IngestStatus::Accepted)
                });
            }
            (Payload::Output(o), Some(cap)) => {
                if flags_upgrade(o, &cap.rule) && cap.decision.decision != Capture::CaptureFull {
                    released = shard.buffer.release(frag.event_id(), now);
                    if let Some(c) = shard.captures.get_mut(frag.event_id()) {
                        c.decision.decision = Capture::CaptureFull;
                    }
                } else if cap.decision.decision == Capture::CaptureSummary {
                    if let Some(env) = stub_inline_bodies(frag.envelope()) {
                        stored = Fragment::new(env).expect("stubbing keeps a fragment valid");
                    }
                }
            }
            (Payload::Outcome(_) | Payload::Feedback(_), Some(cap))
                if cap.decision.decision == Capture::CaptureSummary =>
            {
                return Ok(IngestResponse {
                    dropped: true,
                    ..respond(IngestStatus::Accepted)
                });
            }
            _ => {}
        }

        let appended = if stored.hash() == frag.hash() {
            self.store.append(frag)
        } else {
            self.store.append_stubbed(frag, &stored)
        };
        match appended {
            Ok(_) => {}
            Err(StoreError::Conflict { .. }) => return Ok(respond(IngestStatus::Conflict)),
            Err(e) => return Err(e.into()),
        }
        let outcome = shard.assembly.apply(&stored, now);
        for a in released {
            match self.store.append(&a) {
                Ok(_) | Err(StoreError::Conflict { .. }) => {}
                Err(e) => return Err(e.into()),
            }
            shard.assembly.apply(&a, now);
        }
        Ok(respond(match outcome {
            ApplyOutcome::Quarantined { .. } => IngestStatus::Quarantined,
            ApplyOutcome::Duplicate => IngestStatus::Duplicate,
            _ => IngestStatus::Accepted,
        }))
    }

    pub fn read_record(&self, event_id: &str) -> Result<RecordView, ReadError> {
        Ok(self.store.get_record(event_id)?)
    }

    pub fn read_run(&self, run_id: &str) -> Result<RunView, ReadError> {
        let records = self.store.run_members(run_id);
        if records.is_empty() {
            return Err(ReadError::NotFound(format!("run {run_id:?}")));
        }
        let tree = build_run_tree_from_headers(run_id, records.iter().map(|v| (v.event_id(), v.header())))?;
        Ok(RunView { tree, records })
    }

    pub fn query(&self, filter: &ScanFilter) -> Result<Page, ReadError> {
        Ok(self.store.scan(filter)?)
    }

    /// The capture decision in force for an event, if its start was seen.
    pub fn capture_of(&self, event_id: &str) -> Option<CaptureDecision> {
        self.shard(event_id)
            .lock()
            .captures
            .get(event_id)
            .map(|c| c.decision.clone())
    }

    /// Expire quarantined orphans into the dead-letter area and discard
    /// buffered artifacts whose upgrade window has passed.
    pub fn tick(&self) -> Result<TickReport, StoreError> {
        let now = self.clock.now();
        let mut report = TickReport::default();
        for shard in &self.shards {
            let mut s = shard.lock();
            let expired = s.assembly.expire_orphans(now);
            if !expired.is_empty() {
                report.orphans_dead_lettered += self.store.dead_letter(&expired)?;
            }
            report.buffered_artifacts_discarded += s.buffer.expire(now);
        }
        Ok(report)
    }

    pub fn health(&self) -> Health {
        let mut reasons = Vec::new();
        let store_writable = match self.store.writable() {
            Ok(()) => true,
            Err(r) => {
                reasons.push(r);
                false
            }
        };
        let draining = self.draining.load(Ordering::SeqCst);
        if draining {
            reasons.push("draining".into());
        }
        let (mut depth, mut orphans, mut records) = (0, 0, 0);
        for shard in &self.shards {
            let s = shard.lock();
            depth += s.buffer.depth();
            orphans += s.assembly.orphan_count();
            records += s.assembly.record_count();
        }
        Health {
            healthy: reasons.is_empty(),
            reasons,
            store_writable,
            draining,
            in_flight: self.in_flight.load(Ordering::SeqCst),
            upgrade_buffer_depth: depth,
            orphan_count: orphans,
            records,
            store: self.store.stats(),
        }
    }

    /// Parse, validate and swap in a new policy. On error the old policy
    /// stays in force. Existing events keep their decisions.
    pub fn reload_policy(&self, document: &[u8]) -> Result<(), PolicyError> {
        let p = CapturePolicy::from_json(document)?;
        *self.policy.write() = Arc::new(p);
        Ok(())
    }

    /// Refuse new ingests from now on.
    pub fn begin_drain(&self) {
        self.draining.store(true, Ordering::SeqCst);
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    /// Wait until in-flight ingests finish; false on timeout.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.in_flight() > 0 {
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        true
    }
}
