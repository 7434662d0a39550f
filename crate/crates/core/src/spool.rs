//! Durable write-behind queue for emitting fragments while offline.
//!
//! Entries are canonical fragment bytes in a segment log (the same framing
//! as the store). Delivery state lives in a sidecar log of fixed 13-byte
//! records `position u64 LE | state u8 | attempts u32 LE`; the latest record
//! for a position wins. Both logs sit in a generation directory so the
//! spool can be rewritten without its acked entries.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::collector::IngestStatus;
use crate::record::{Fragment, FragmentEnvelope, FragmentError, FragmentKind};
use crate::segment::{generations, SegmentLog, DEFAULT_SEGMENT_BYTES, FRAME_OVERHEAD};

/// Deliveries that got a conflict (or invalid) response before the entry is
/// given up on. Transient failures never count towards this.
pub const MAX_CONFLICT_ATTEMPTS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryState {
    Pending,
    Acked,
    Dead,
}

impl EntryState {
    fn to_byte(self) -> u8 {
        match self {
            EntryState::Pending => 0,
            EntryState::Acked => 1,
            EntryState::Dead => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(EntryState::Pending),
            1 => Some(EntryState::Acked),
            2 => Some(EntryState::Dead),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpoolEntry {
    pub position: u64,
    pub kind: FragmentKind,
    pub event_id: String,
    pub fragment_id: String,
    pub bytes: Vec<u8>,
    /// Deliveries answered with a conflict or invalid status.
    pub attempts: u32,
    pub state: EntryState,
}

#[derive(Debug, thiserror::Error)]
pub enum SpoolError {
    #[error("rejected before spooling: {0}")]
    Invalid(#[from] FragmentError),
    #[error("append for event {0:?} before its start; enqueue the start first or mark it as started elsewhere")]
    AppendBeforeStart(String),
    #[error("spool full: {needed} bytes needed, {available} available")]
    Full { needed: u64, available: u64 },
    #[error("spool is locked by another process")]
    Locked,
    #[error("corrupt spool: {0}")]
    Corrupt(String),
    #[error("spool I/O failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EnqueueOptions {
    /// The event's start is emitted by another process or spool.
    pub start_elsewhere: bool,
}

#[derive(Debug, Clone)]
pub struct SpoolConfig {
    /// Cap on the bytes of live entries on disk.
    pub max_bytes: Option<u64>,
    pub max_segment_bytes: u64,
    pub fsync: bool,
}

impl Default for SpoolConfig {
    fn default() -> Self {
        SpoolConfig {
            max_bytes: None,
            max_segment_bytes: DEFAULT_SEGMENT_BYTES,
            fsync: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    /// Nothing was sent.
    #[error("collector unreachable: {0}")]
    Unreachable(String),
    /// The request may or may not have reached the collector.
    #[error("ambiguous delivery: {0}")]
    Ambiguous(String),
}

pub trait Transport {
    fn deliver(&self, kind: FragmentKind, body: &[u8]) -> Result<IngestStatus, TransportError>;
}

impl<T: Transport + ?Sized> Transport for &T {
    fn deliver(&self, kind: FragmentKind, body: &[u8]) -> Result<IngestStatus, TransportError> {
        (**self).deliver(kind, body)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub initial: Duration,
    pub multiplier: f64,
    pub max_delay: Duration,
    /// Upper bound on passes per `sync` call.
    pub max_passes: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            initial: Duration::from_millis(200),
            multiplier: 2.0,
            max_delay: Duration::from_secs(30),
            max_passes: 8,
        }
    }
}

impl Backoff {
    /// Delay after the `n`th consecutive failed pass (0-based).
    pub fn delay(&self, n: u32) -> Duration {
        let d = self.initial.as_secs_f64() * self.multiplier.powi(n as i32);
        Duration::from_secs_f64(d.min(self.max_delay.as_secs_f64()))
    }
}

/// Outcome of one `sync` call. Every delivery attempt that reached (or may
/// have reached) the collector is counted once in `sent` and once in
/// exactly one of the other counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub sent: u64,
    pub acked: u64,
    pub duplicates: u64,
    pub quarantined: u64,
    /// Conflict or invalid responses for entries that stay pending.
    pub conflicts: u64,
    /// Sends whose result is unknown; the entry stays pending.
    pub still_pending: u64,
    pub dead_lettered: u64,
    pub passes: u32,
    /// Pending entries left after the call.
    pub remaining: u64,
    #[serde(with = "millis")]
    pub duration: Duration,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl SyncReport {
    pub fn balanced(&self) -> bool {
        self.sent
            == self.acked
                + self.duplicates
                + self.quarantined
                + self.conflicts
                + self.still_pending
                + self.dead_lettered
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SpoolCounts {
    pub pending: u64,
    pub acked: u64,
    pub dead: u64,
    pub bytes: u64,
}

struct Inner {
    generation: u64,
    entries_log: SegmentLog,
    state_log: SegmentLog,
    entries: BTreeMap<u64, SpoolEntry>,
    started: HashSet<String>,
    bytes: u64,
}

pub struct Spool {
    root: PathBuf,
    config: SpoolConfig,
    _lock: File,
    inner: Mutex<Inner>,
    /// Held for the duration of a sync pass.
    syncing: Mutex<()>,
}

fn entry_bytes(payload_len: usize) -> u64 {
    payload_len as u64 + FRAME_OVERHEAD
}

fn state_record(position: u64, state: EntryState, attempts: u32) -> [u8; 13] {
    let mut b = [0u8; 13];
    b[..8].copy_from_slice(&position.to_le_bytes());
    b[8] = state.to_byte();
    b[9..].copy_from_slice(&attempts.to_le_bytes());
    b
}

fn open_logs(root: &Path, generation: u64, seg: u64) -> Result<(SegmentLog, SegmentLog, BTreeMap<u64, SpoolEntry>), SpoolError> {
    let dir = generations::dir(root, generation);
    let floor = match fs::read(dir.join("floor")) {
        Ok(b) => u64::from_le_bytes(
            b.as_slice()
                .try_into()
                .map_err(|_| SpoolError::Corrupt("floor file is not 8 bytes".into()))?,
        ),
        Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
        Err(e) => return Err(e.into()),
    };
    let (mut entries_log, rec) = SegmentLog::open(dir.join("entries"), seg)?;
    entries_log.raise_next_position(floor);
    let (state_log, states) = SegmentLog::open(dir.join("state"), seg)?;
    let mut entries = BTreeMap::new();
    for e in rec.entries {
        let f = Fragment::decode(&e.payload)
            .map_err(|d| SpoolError::Corrupt(format!("entry {}: {d}", e.position)))?;
        entries.insert(
            e.position,
            SpoolEntry {
                position: e.position,
                kind: f.kind(),
                event_id: f.event_id().to_owned(),
                fragment_id: f.fragment_id().to_owned(),
                bytes: e.payload,
                attempts: 0,
                state: EntryState::Pending,
            },
        );
    }
    for s in states.entries {
        let p = &s.payload;
        if p.len() != 13 {
            return Err(SpoolError::Corrupt(format!("state record of {} bytes", p.len())));
        }
        let pos = u64::from_le_bytes(p[..8].try_into().expect("8 bytes"));
        let state = EntryState::from_byte(p[8]).ok_or_else(|| SpoolError::Corrupt(format!("state byte {}", p[8])))?;
        let attempts = u32::from_le_bytes(p[9..].try_into().expect("4 bytes"));
        if let Some(e) = entries.get_mut(&pos) {
            e.state = state;
            e.attempts = attempts;
        }
    }
    Ok((entries_log, state_log, entries))
}

impl Spool {
    /// Open or create a spool. Holds an exclusive lock on the directory.
    pub fn open(root: impl AsRef<Path>, config: SpoolConfig) -> Result<Self, SpoolError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(root.join("LOCK"))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(SpoolError::Locked),
            Err(fs::TryLockError::Error(e)) => return Err(e.into()),
        }
        let generation = generations::open(&root)?;
        let (entries_log, state_log, entries) = open_logs(&root, generation, config.max_segment_bytes)?;
        let started = entries
            .values()
            .filter(|e| e.kind == FragmentKind::Start)
            .map(|e| e.event_id.clone())
            .collect();
        let bytes = entries.values().map(|e| entry_bytes(e.bytes.len())).sum();
        Ok(Spool {
            root,
            config,
            _lock: lock,
            inner: Mutex::new(Inner {
                generation,
                entries_log,
                state_log,
                entries,
                started,
                bytes,
            }),
            syncing: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Validate and durably queue one fragment. Returns its position.
    pub fn enqueue(&self, env: FragmentEnvelope, opts: EnqueueOptions) -> Result<u64, SpoolError> {
        let f = Fragment::new(env)?;
        let mut inner = self.inner.lock();
        if f.kind().is_append() && !opts.start_elsewhere && !inner.started.contains(f.event_id()) {
            return Err(SpoolError::AppendBeforeStart(f.event_id().to_owned()));
        }
        let size = entry_bytes(f.canonical().len());
        if let Some(max) = self.config.max_bytes {
            if inner.bytes + size > max {
                return Err(SpoolError::Full {
                    needed: size,
                    available: max.saturating_sub(inner.bytes),
                });
            }
        }
        let pos = inner.entries_log.append(f.canonical())?;
        if self.config.fsync {
            inner.entries_log.sync()?;
        }
        inner.bytes += size;
        if f.kind() == FragmentKind::Start {
            inner.started.insert(f.event_id().to_owned());
        }
        inner.entries.insert(
            pos,
            SpoolEntry {
                position: pos,
                kind: f.kind(),
                event_id: f.event_id().to_owned(),
                fragment_id: f.fragment_id().to_owned(),
                bytes: f.canonical().to_vec(),
                attempts: 0,
                state: EntryState::Pending,
            },
        );
        Ok(pos)
    }

    pub fn entries(&self) -> Vec<SpoolEntry> {
        self.inner.lock().entries.values().cloned().collect()
    }

    pub fn pending(&self) -> Vec<SpoolEntry> {
        self.inner
            .lock()
            .entries
            .values()
            .filter(|e| e.state == EntryState::Pending)
            .cloned()
            .collect()
    }

    pub fn counts(&self) -> SpoolCounts {
        let inner = self.inner.lock();
        let mut c = SpoolCounts {
            bytes: inner.bytes,
            ..SpoolCounts::default()
        };
        for e in inner.entries.values() {
            match e.state {
                EntryState::Pending => c.pending += 1,
                EntryState::Acked => c.acked += 1,
                EntryState::Dead => c.dead += 1,
            }
        }
        c
    }

    fn set_state(inner: &mut Inner, position: u64, state: EntryState, attempts: u32) -> io::Result<()> {
        inner.state_log.append(&state_record(position, state, attempts))?;
        if let Some(e) = inner.entries.get_mut(&position) {
            e.state = state;
            e.attempts = attempts;
        }
        Ok(())
    }

    /// Mark the oldest pending artifacts dead until at least `bytes` are
    /// freed, then rewrite the spool. Returns how many were shed.
    pub fn shed_artifacts(&self, bytes: u64) -> Result<usize, SpoolError> {
        let _lease = self.syncing.lock();
        let shed = {
            let mut inner = self.inner.lock();
            let victims: Vec<(u64, u64)> = inner
                .entries
                .values()
                .filter(|e| e.state == EntryState::Pending && e.kind == FragmentKind::Artifact)
                .map(|e| (e.position, entry_bytes(e.bytes.len())))
                .collect();
            let mut freed = 0;
            let mut shed = 0;
            for (pos, size) in victims {
                if freed >= bytes {
                    break;
                }
                let attempts = inner.entries[&pos].attempts;
                Self::set_state(&mut inner, pos, EntryState::Dead, attempts)?;
                freed += size;
                shed += 1;
            }
            inner.state_log.sync()?;
            shed
        };
        self.rewrite()?;
        Ok(shed)
    }

    /// Drop acked and dead entries from disk. Acked starts are kept so
    /// later appends for their events are still accepted.
    pub fn compact(&self) -> Result<(), SpoolError> {
        let _lease = self.syncing.lock();
        self.rewrite()
    }

    fn rewrite(&self) -> Result<(), SpoolError> {
        let mut inner = self.inner.lock();
        let next_gen = inner.generation + 1;
        let dir = generations::dir(&self.root, next_gen);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let floor = inner.entries_log.next_position();
        let keep: Vec<SpoolEntry> = inner
            .entries
            .values()
            .filter(|e| {
                e.state == EntryState::Pending || (e.state == EntryState::Acked && e.kind == FragmentKind::Start)
            })
            .cloned()
            .collect();
        let seg = self.config.max_segment_bytes;
        {
            fs::create_dir_all(&dir)?;
            let floor_file = File::create(dir.join("floor"))?;
            io::Write::write_all(&mut &floor_file, &floor.to_le_bytes())?;
            floor_file.sync_all()?;
            let (mut entries_log, _) = SegmentLog::open(dir.join("entries"), seg)?;
            let (mut state_log, _) = SegmentLog::open(dir.join("state"), seg)?;
            for e in &keep {
                entries_log.append_at(e.position, &e.bytes)?;
                if e.state != EntryState::Pending || e.attempts > 0 {
                    state_log.append(&state_record(e.position, e.state, e.attempts))?;
                }
            }
            entries_log.sync()?;
            state_log.sync()?;
        }
        generations::commit(&self.root, next_gen)?;
        let old = generations::dir(&self.root, inner.generation);
        let (entries_log, state_log, entries) = open_logs(&self.root, next_gen, seg)?;
        inner.bytes = entries.values().map(|e| entry_bytes(e.bytes.len())).sum();
        inner.entries_log = entries_log;
        inner.state_log = state_log;
        inner.entries = entries;
        inner.generation = next_gen;
        drop(inner);
        fs::remove_dir_all(old)?;
        Ok(())
    }

    /// Deliver pending entries oldest-first in batches. A transport failure
    /// ends the pass; the next pass starts after an exponential backoff.
    pub fn sync(&self, transport: &dyn Transport, batch_size: usize, backoff: Backoff) -> Result<SyncReport, SpoolError> {
        let _lease = self.syncing.lock();
        let started = Instant::now();
        let mut report = SyncReport::default();
        let mut failures = 0u32;
        while report.passes < backoff.max_passes {
            let pending = self.pending();
            if pending.is_empty() {
                break;
            }
            report.passes += 1;
            let mut failed = false;
            'pass: for batch in pending.chunks(batch_size.max(1)) {
                let mut inner = self.inner.lock();
                let mut result = Ok(());
                for e in batch {
                    let outcome = match transport.deliver(e.kind, &e.bytes) {
                        Ok(s) => s,
                        Err(TransportError::Unreachable(_)) => {
                            failed = true;
                            break;
                        }
                        Err(TransportError::Ambiguous(_)) => {
                            report.sent += 1;
                            report.still_pending += 1;
                            failed = true;
                            break;
                        }
                    };
                    report.sent += 1;
                    let (state, attempts) = match outcome {
                        IngestStatus::Accepted => {
                            report.acked += 1;
                            (EntryState::Acked, e.attempts)
                        }
                        IngestStatus::Duplicate => {
                            report.duplicates += 1;
                            (EntryState::Acked, e.attempts)
                        }
                        IngestStatus::Quarantined => {
                            report.quarantined += 1;
                            (EntryState::Acked, e.attempts)
                        }
                        IngestStatus::Conflict | IngestStatus::Invalid => {
                            let attempts = e.attempts + 1;
                            if attempts >= MAX_CONFLICT_ATTEMPTS {
                                report.dead_lettered += 1;
                                (EntryState::Dead, attempts)
                            } else {
                                report.conflicts += 1;
                                (EntryState::Pending, attempts)
                            }
                        }
                    };
                    if let Err(err) = Self::set_state(&mut inner, e.position, state, attempts) {
                        result = Err(err);
                        break;
                    }
                }
                inner.state_log.sync()?;
                result?;
                if failed {
                    break 'pass;
                }
            }
            if failed {
                let delay = backoff.delay(failures);
                failures += 1;
                if report.passes < backoff.max_passes {
                    std::thread::sleep(delay);
                }
            } else {
                failures = 0;
            }
        }
        report.remaining = self.counts().pending;
        report.duration = started.elapsed();
        Ok(report)
    }
}
