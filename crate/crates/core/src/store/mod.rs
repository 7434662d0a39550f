//! Durable append-only fragment storage.
//!
//! Fragments are the source of truth: every accepted fragment is written to
//! a segmented log (see [`crate::segment`]) and records are materialized on
//! read by folding an event's fragments. An in-memory index keyed by
//! event_id and fragment_id is rebuilt from the log on open.
//!
//! Log payloads start with a one-byte tag:
//!
//! | tag | body                                              |
//! |-----|---------------------------------------------------|
//! | 1   | canonical fragment bytes                          |
//! | 2   | 32-byte hash of the original bytes, then the canonical bytes of a body-stubbed fragment |
//! | 3   | fragment_id moved to the dead-letter area         |
//! | 4   | canonical JSON of a [`RecordSummary`]             |
//! | 5   | canonical JSON of a [`Tombstone`]                 |
//! | 6   | empty; written last by compaction                 |
//!
//! Compaction rewrites the log into a new generation directory and flips the
//! `CURRENT` pointer file atomically (see [`generations`]).

mod compact;
mod scan;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::assembly::assemble;
use crate::blob::{BlobError, BlobStore};
use crate::canonical;
use crate::record::{
    conformance_level, record_digest, ConformanceProfile, ContentAddress, DecodeError, Digest,
    Fragment, Header, MedLogRecord, ModelInstance, RecordStatus, TargetIdentity, UserIdentity,
};
use crate::segment::{generations, LogEntry, SegmentLog, DEFAULT_SEGMENT_BYTES};
use crate::time::Timestamp;

pub use compact::{stub_inline_bodies, CompactionReport, RetentionError, RetentionPolicy, TierCounts};
pub use scan::{FilterError, Page, ScanFilter, DEFAULT_PAGE_SIZE, MAX_PAGE_SIZE, PREDICATES};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("fragment_id {fragment_id:?} already stored with different content")]
    Conflict { fragment_id: String },
    #[error("record {0:?} not found")]
    NotFound(String),
    #[error("store is read-only: {0}")]
    ReadOnly(String),
    #[error("store directory is locked by another process")]
    Locked,
    #[error("store I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt store entry at position {position}: {reason}")]
    Corrupt { position: u64, reason: String },
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Retention(#[from] RetentionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    /// fsync before acknowledging an append (group-committed).
    Fsync,
    /// Leave flushing to the OS. For tests and throwaway stores.
    Buffered,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub max_segment_bytes: u64,
    pub durability: Durability,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            max_segment_bytes: DEFAULT_SEGMENT_BYTES,
            durability: Durability::Fsync,
        }
    }
}

/// What remains of a record after the summary tier expires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordSummary {
    pub event_id: String,
    pub header: Header,
    pub model: ModelInstance,
    pub user: UserIdentity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetIdentity>,
    pub conformance: ConformanceProfile,
    pub digest: Digest,
    pub status: RecordStatus,
    pub summarized_at: Timestamp,
}

impl RecordSummary {
    pub fn of(rec: &MedLogRecord, at: Timestamp) -> Self {
        RecordSummary {
            event_id: rec.event_id.clone(),
            header: rec.header.clone(),
            model: rec.model.clone(),
            user: rec.user.clone(),
            target: rec.target.clone(),
            conformance: conformance_level(rec),
            digest: record_digest(rec),
            status: rec.status,
            summarized_at: at,
        }
    }
}

/// Dedup memory of a fragment that is no longer live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tombstone {
    pub fragment_id: String,
    pub event_id: String,
    pub hash: String,
}

/// A record as served by reads: the full assembly or its summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum RecordView {
    Full {
        record: MedLogRecord,
        conformance: ConformanceProfile,
        digest: Digest,
    },
    Summary(RecordSummary),
}

impl RecordView {
    pub fn full(record: MedLogRecord) -> Self {
        RecordView::Full {
            conformance: conformance_level(&record),
            digest: record_digest(&record),
            record,
        }
    }

    pub fn event_id(&self) -> &str {
        match self {
            RecordView::Full { record, .. } => &record.event_id,
            RecordView::Summary(s) => &s.event_id,
        }
    }

    pub fn header(&self) -> &Header {
        match self {
            RecordView::Full { record, .. } => &record.header,
            RecordView::Summary(s) => &s.header,
        }
    }

    pub fn model_id(&self) -> &str {
        match self {
            RecordView::Full { record, .. } => &record.model.model_id,
            RecordView::Summary(s) => &s.model.model_id,
        }
    }

    pub fn conformance(&self) -> ConformanceProfile {
        match self {
            RecordView::Full { conformance, .. } => *conformance,
            RecordView::Summary(s) => s.conformance,
        }
    }

    pub fn digest(&self) -> Digest {
        match self {
            RecordView::Full { digest, .. } => *digest,
            RecordView::Summary(s) => s.digest,
        }
    }

    pub fn status(&self) -> RecordStatus {
        match self {
            RecordView::Full { record, .. } => record.status,
            RecordView::Summary(s) => s.status,
        }
    }

    pub fn record(&self) -> Option<&MedLogRecord> {
        match self {
            RecordView::Full { record, .. } => Some(record),
            RecordView::Summary(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoredFragment {
    pub position: u64,
    /// The fragment as stored, possibly with bodies replaced by stubs.
    pub fragment: Fragment,
    /// Hash of the bytes originally received; the dedup key.
    pub original_hash: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Appended {
    pub position: u64,
    pub duplicate: bool,
}

/// What the store remembers about a fragment_id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DedupInfo {
    pub hash: [u8; 32],
    pub event_id: String,
    pub position: Option<u64>,
    pub live: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub live_fragments: usize,
    pub events: usize,
    pub summaries: usize,
    pub tombstones: usize,
    pub dead_lettered: u64,
    pub next_position: u64,
}

#[derive(Debug, Clone)]
enum LogRecord {
    Fragment(Fragment),
    Stubbed { original_hash: [u8; 32], fragment: Fragment },
    DeadLetter(String),
    Summary(RecordSummary),
    Tombstone(Tombstone),
    Checkpoint,
}

impl LogRecord {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            LogRecord::Fragment(f) => {
                out.push(1);
                out.extend_from_slice(f.canonical());
            }
            LogRecord::Stubbed { original_hash, fragment } => {
                out.push(2);
                out.extend_from_slice(original_hash);
                out.extend_from_slice(fragment.canonical());
            }
            LogRecord::DeadLetter(id) => {
                out.push(3);
                out.extend_from_slice(id.as_bytes());
            }
            LogRecord::Summary(s) => {
                out.push(4);
                out.extend(canonical::to_canonical_bytes(s).expect("summaries are finite"));
            }
            LogRecord::Tombstone(t) => {
                out.push(5);
                out.extend(canonical::to_canonical_bytes(t).expect("tombstones are plain strings"));
            }
            LogRecord::Checkpoint => out.push(6),
        }
        out
    }

    fn decode(e: &LogEntry) -> Result<Self, StoreError> {
        let corrupt = |reason: String| StoreError::Corrupt {
            position: e.position,
            reason,
        };
        let (tag, body) = e
            .payload
            .split_first()
            .ok_or_else(|| corrupt("empty payload".into()))?;
        let frag = |b: &[u8]| Fragment::decode(b).map_err(|d: DecodeError| corrupt(d.to_string()));
        Ok(match tag {
            1 => LogRecord::Fragment(frag(body)?),
            2 if body.len() >= 32 => LogRecord::Stubbed {
                original_hash: body[..32].try_into().expect("32 bytes"),
                fragment: frag(&body[32..])?,
            },
            3 => LogRecord::DeadLetter(
                String::from_utf8(body.to_vec()).map_err(|e| corrupt(e.to_string()))?,
            ),
            4 => LogRecord::Summary(serde_json::from_slice(body).map_err(|e| corrupt(e.to_string()))?),
            5 => LogRecord::Tombstone(serde_json::from_slice(body).map_err(|e| corrupt(e.to_string()))?),
            6 => LogRecord::Checkpoint,
            t => return Err(corrupt(format!("unknown tag {t}"))),
        })
    }
}

#[derive(Debug, Default)]
struct Index {
    dedup: HashMap<String, DedupInfo>,
    events: HashMap<String, BTreeMap<u64, StoredFragment>>,
    summaries: BTreeMap<String, RecordSummary>,
}

impl Index {
    fn apply(&mut self, position: u64, rec: LogRecord) {
        match rec {
            LogRecord::Fragment(f) => {
                let h = *f.hash();
                self.insert_fragment(position, f, h);
            }
            LogRecord::Stubbed { original_hash, fragment } => {
                self.insert_fragment(position, fragment, original_hash)
            }
            LogRecord::DeadLetter(fid) => {
                if let Some(d) = self.dedup.get_mut(&fid) {
                    if d.live {
                        d.live = false;
                        if let (Some(pos), Some(ev)) = (d.position, self.events.get_mut(&d.event_id)) {
                            ev.remove(&pos);
                            if ev.is_empty() {
                                self.events.remove(&d.event_id);
                            }
                        }
                    }
                }
            }
            LogRecord::Summary(s) => {
                self.summaries.insert(s.event_id.clone(), s);
            }
            LogRecord::Checkpoint => {}
            LogRecord::Tombstone(t) => {
                let mut hash = [0u8; 32];
                if hex::decode_to_slice(&t.hash, &mut hash).is_ok() {
                    self.dedup.insert(
                        t.fragment_id,
                        DedupInfo {
                            hash,
                            event_id: t.event_id,
                            position: None,
                            live: false,
                        },
                    );
                }
            }
        }
    }

    fn insert_fragment(&mut self, position: u64, fragment: Fragment, original_hash: [u8; 32]) {
        self.dedup.insert(
            fragment.fragment_id().to_owned(),
            DedupInfo {
                hash: original_hash,
                event_id: fragment.event_id().to_owned(),
                position: Some(position),
                live: true,
            },
        );
        self.events
            .entry(fragment.event_id().to_owned())
            .or_default()
            .insert(
                position,
                StoredFragment {
                    position,
                    fragment,
                    original_hash,
                },
            );
    }

    fn live_fragments(&self) -> Vec<StoredFragment> {
        let mut all: Vec<StoredFragment> = self
            .events
            .values()
            .flat_map(|m| m.values().cloned())
            .collect();
        all.sort_by_key(|s| s.position);
        all
    }

    fn view(&self, event_id: &str) -> Option<RecordView> {
        if let Some(frags) = self.events.get(event_id) {
            let assembled = assemble(frags.values().map(|s| s.fragment.clone()));
            if let Some(rec) = assembled.records.into_values().next() {
                return Some(RecordView::full(rec));
            }
        }
        self.summaries
            .get(event_id)
            .map(|s| RecordView::Summary(s.clone()))
    }
}

struct Writer {
    log: SegmentLog,
    generation: u64,
}

#[derive(Debug, Default)]
struct Durable {
    /// Every position below this is on stable storage.
    upto: u64,
}

pub struct Store {
    root: PathBuf,
    config: StoreConfig,
    _lock: File,
    writer: Mutex<Writer>,
    index: RwLock<Index>,
    durable: Mutex<Durable>,
    written_upto: AtomicU64,
    blobs: BlobStore,
    deadletter: Mutex<SegmentLog>,
    dead_lettered: AtomicU64,
    read_only: AtomicBool,
    fault: Mutex<Option<String>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish_non_exhaustive()
    }
}

fn generation_dir(root: &Path, generation: u64) -> PathBuf {
    generations::dir(&root.join("log"), generation)
}

impl Store {
    /// Open or create a store rooted at `root`. Takes an exclusive lock on
    /// the directory for the lifetime of the handle.
    pub fn open(root: impl AsRef<Path>, config: StoreConfig) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(root.join("LOCK"))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked),
            Err(fs::TryLockError::Error(e)) => return Err(e.into()),
        }

        let generation = generations::open(&root.join("log"))?;
        let (log, recovery) = SegmentLog::open(generation_dir(&root, generation), config.max_segment_bytes)?;
        let mut index = Index::default();
        for e in &recovery.entries {
            index.apply(e.position, LogRecord::decode(e)?);
        }
        let (deadletter, dl) = SegmentLog::open(root.join("deadletter"), config.max_segment_bytes)?;
        let next = log.next_position();
        let blobs = BlobStore::open(root.join("blobs"))?;
        Ok(Store {
            root,
            config,
            _lock: lock,
            writer: Mutex::new(Writer { log, generation }),
            index: RwLock::new(index),
            durable: Mutex::new(Durable { upto: next }),
            written_upto: AtomicU64::new(next),
            blobs,
            deadletter: Mutex::new(deadletter),
            dead_lettered: AtomicU64::new(dl.entries.len() as u64),
            read_only: AtomicBool::new(false),
            fault: Mutex::new(None),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    /// Administrative write fence; reads keep working.
    pub fn set_read_only(&self, on: bool) {
        self.read_only.store(on, Ordering::SeqCst);
    }

    /// `Ok` if appends can be accepted, else the reason they cannot.
    pub fn writable(&self) -> Result<(), String> {
        if self.read_only.load(Ordering::SeqCst) {
            return Err("store is in read-only mode".into());
        }
        if let Some(f) = self.fault.lock().clone() {
            return Err(f);
        }
        let w = self.writer.lock();
        w.log
            .probe_writable()
            .map_err(|e| format!("data directory not writable: {e}"))
    }

    fn check_writable(&self) -> Result<(), StoreError> {
        if self.read_only.load(Ordering::SeqCst) {
            return Err(StoreError::ReadOnly("store is in read-only mode".into()));
        }
        if let Some(f) = self.fault.lock().clone() {
            return Err(StoreError::ReadOnly(f));
        }
        Ok(())
    }

    fn record_fault(&self, e: &io::Error) {
        // After a failed fsync the page cache state is unknown; stop taking writes.
        *self.fault.lock() = Some(format!("I/O fault: {e}"));
    }

    /// What the store knows about `fragment_id`.
    pub fn lookup(&self, fragment_id: &str) -> Option<DedupInfo> {
        self.index.read().dedup.get(fragment_id).cloned()
    }

    /// Durably append a fragment. Re-appending identical bytes under a known
    /// fragment_id returns the original position.
    pub fn append(&self, fragment: &Fragment) -> Result<Appended, StoreError> {
        self.append_inner(fragment, None)
    }

    /// Append `stored` in place of `original`, keeping the original bytes'
    /// hash as the dedup key. Used when bodies are stubbed at ingestion.
    pub fn append_stubbed(&self, original: &Fragment, stored: &Fragment) -> Result<Appended, StoreError> {
        debug_assert_eq!(original.fragment_id(), stored.fragment_id());
        self.append_inner(stored, Some(*original.hash()))
    }

    fn append_inner(&self, fragment: &Fragment, original: Option<[u8; 32]>) -> Result<Appended, StoreError> {
        self.check_writable()?;
        let dedup_hash = original.unwrap_or(*fragment.hash());
        let position = {
            let mut w = self.writer.lock();
            if let Some(d) = self.index.read().dedup.get(fragment.fragment_id()) {
                if d.hash != dedup_hash {
                    return Err(StoreError::Conflict {
                        fragment_id: fragment.fragment_id().to_owned(),
                    });
                }
                let pos = d.position;
                drop(w);
                if let Some(p) = pos {
                    self.wait_durable(p)?;
                }
                return Ok(Appended {
                    position: pos.unwrap_or(u64::MAX),
                    duplicate: true,
                });
            }
            let rec = match original {
                Some(h) => LogRecord::Stubbed {
                    original_hash: h,
                    fragment: fragment.clone(),
                },
                None => LogRecord::Fragment(fragment.clone()),
            };
            let pos = w.log.append(&rec.encode()).inspect_err(|e| self.record_fault(e))?;
            self.index.write().apply(pos, rec);
            self.written_upto.store(pos + 1, Ordering::SeqCst);
            pos
        };
        self.wait_durable(position)?;
        Ok(Appended {
            position,
            duplicate: false,
        })
    }

    /// Group commit: one fsync covers every append written before it.
    fn wait_durable(&self, position: u64) -> Result<(), StoreError> {
        if self.config.durability == Durability::Buffered {
            return Ok(());
        }
        let mut d = self.durable.lock();
        if d.upto > position {
            return Ok(());
        }
        let (target, sealed, handle) = {
            let w = self.writer.lock();
            (w.log.next_position(), w.log.active_first(), w.log.sync_handle())
        };
        if position < sealed {
            return Ok(());
        }
        handle
            .and_then(|h| h.sync_data())
            .inspect_err(|e| self.record_fault(e))?;
        d.upto = d.upto.max(target);
        Ok(())
    }

    /// Move expired orphans out of the live set into the dead-letter area.
    /// Returns how many were live and got moved.
    pub fn dead_letter(&self, fragments: &[Fragment]) -> Result<usize, StoreError> {
        self.check_writable()?;
        let mut w = self.writer.lock();
        let live: Vec<&Fragment> = {
            let idx = self.index.read();
            fragments
                .iter()
                .filter(|f| {
                    idx.dedup
                        .get(f.fragment_id())
                        .is_some_and(|d| d.live && d.hash == *f.hash())
                })
                .collect()
        };
        if live.is_empty() {
            return Ok(0);
        }
        {
            let mut dl = self.deadletter.lock();
            for f in &live {
                dl.append(f.canonical())?;
            }
            if self.config.durability == Durability::Fsync {
                dl.sync()?;
            }
        }
        for f in &live {
            let rec = LogRecord::DeadLetter(f.fragment_id().to_owned());
            let pos = w.log.append(&rec.encode())?;
            self.index.write().apply(pos, rec);
            self.written_upto.store(pos + 1, Ordering::SeqCst);
        }
        if self.config.durability == Durability::Fsync {
            w.log.sync()?;
        }
        self.dead_lettered.fetch_add(live.len() as u64, Ordering::SeqCst);
        Ok(live.len())
    }

    /// Fragments previously moved to the dead-letter area.
    pub fn dead_letters(&self) -> Result<Vec<Fragment>, StoreError> {
        let dir = self.deadletter.lock().dir().to_path_buf();
        // Reopening a second handle on the same directory is safe for reads.
        let (_, rec) = SegmentLog::open(&dir, self.config.max_segment_bytes)?;
        rec.entries
            .iter()
            .map(|e| {
                Fragment::decode(&e.payload).map_err(|d| StoreError::Corrupt {
                    position: e.position,
                    reason: d.to_string(),
                })
            })
            .collect()
    }

    pub fn put_blob(&self, bytes: &[u8]) -> Result<ContentAddress, StoreError> {
        self.check_writable()?;
        Ok(self.blobs.put(bytes)?)
    }

    pub fn get_blob(&self, addr: &ContentAddress) -> Result<Vec<u8>, StoreError> {
        Ok(self.blobs.get(addr)?)
    }

    /// The assembled record (or its summary).
    pub fn get_record(&self, event_id: &str) -> Result<RecordView, StoreError> {
        self.index
            .read()
            .view(event_id)
            .ok_or_else(|| StoreError::NotFound(event_id.to_owned()))
    }

    /// Live fragments of one event, in log order.
    pub fn fragments_of(&self, event_id: &str) -> Vec<StoredFragment> {
        self.index
            .read()
            .events
            .get(event_id)
            .map(|m| m.values().cloned().collect())
            .unwrap_or_default()
    }

    /// Every live fragment, in log order.
    pub fn live_fragments(&self) -> Vec<StoredFragment> {
        self.index.read().live_fragments()
    }

    /// Records (full or summarized) whose header carries `run_id`.
    pub fn run_members(&self, run_id: &str) -> Vec<RecordView> {
        let idx = self.index.read();
        let mut ids: Vec<&String> = idx.events.keys().chain(idx.summaries.keys()).collect();
        ids.sort();
        ids.dedup();
        ids.into_iter()
            .filter_map(|id| idx.view(id))
            .filter(|v| v.header().run_id.as_deref() == Some(run_id))
            .collect()
    }

    pub fn stats(&self) -> StoreStats {
        let idx = self.index.read();
        StoreStats {
            live_fragments: idx.events.values().map(BTreeMap::len).sum(),
            events: idx.events.len(),
            summaries: idx.summaries.len(),
            tombstones: idx.dedup.values().filter(|d| !d.live).count(),
            dead_lettered: self.dead_lettered.load(Ordering::SeqCst),
            next_position: self.written_upto.load(Ordering::SeqCst),
        }
    }

    /// Digest of the logical store content: live fragments as stored and
    /// summaries. Independent of positions and arrival order.
    pub fn state_digest(&self) -> Digest {
        let idx = self.index.read();
        let mut lines: Vec<String> = idx
            .events
            .values()
            .flat_map(|m| m.values())
            .map(|s| format!("F {} {}", s.fragment.fragment_id(), hex::encode(s.fragment.hash())))
            .collect();
        lines.extend(idx.summaries.values().map(|s| {
            let bytes = canonical::to_canonical_bytes(s).expect("finite summary");
            format!("S {} {}", s.event_id, hex::encode(Sha256::digest(bytes)))
        }));
        lines.sort();
        let mut h = Sha256::new();
        for l in lines {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        Digest(h.finalize().into())
    }
}
