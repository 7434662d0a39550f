use std::collections::HashSet;
use std::fs;
use std::time::{Duration, Instant};

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};

use super::{generation_dir, Index, LogRecord, RecordSummary, Store, StoreError, Tombstone};
use crate::assembly::assemble;
use crate::canonical;
use crate::record::{
    Body, ContentAddress, Fragment, FragmentEnvelope, FragmentKind, InlineContent, InputMode, Payload,
};
use crate::segment::{generations, SegmentLog};
use crate::time::Timestamp;

/// Time-to-live per retention tier, measured from `emitted_at` for
/// fragment-level tiers and from `header.invoked_at` for whole records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    #[serde(with = "days")]
    pub tier_summary_ttl: TimeDelta,
    #[serde(with = "days")]
    pub tier_content_ttl: TimeDelta,
    #[serde(with = "days")]
    pub tier_artifact_ttl: TimeDelta,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        RetentionPolicy {
            tier_summary_ttl: TimeDelta::days(3650),
            tier_content_ttl: TimeDelta::days(365),
            tier_artifact_ttl: TimeDelta::days(90),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("retention TTLs must satisfy artifact <= content <= summary and be non-negative")]
pub struct RetentionError;

impl RetentionPolicy {
    pub fn validate(&self) -> Result<(), RetentionError> {
        let ok = TimeDelta::zero() <= self.tier_artifact_ttl
            && self.tier_artifact_ttl <= self.tier_content_ttl
            && self.tier_content_ttl <= self.tier_summary_ttl;
        ok.then_some(()).ok_or(RetentionError)
    }
}

/// Durations in whole days on the wire.
mod days {
    use chrono::TimeDelta;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &TimeDelta, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(d.num_days())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<TimeDelta, D::Error> {
        let n = i64::deserialize(d)?;
        TimeDelta::try_days(n).ok_or_else(|| serde::de::Error::custom("day count out of range"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCounts {
    /// Artifact fragments deleted.
    pub artifact: u64,
    /// Fragments whose inline bodies were replaced by content-address stubs.
    pub content: u64,
    /// Fragments folded into a summary row.
    pub summary: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactionReport {
    pub now: Timestamp,
    pub fragments_removed: TierCounts,
    pub blobs_removed: u64,
    pub summaries_written: u64,
    /// Events that could not be summarized (no start in the live set).
    pub skipped: Vec<String>,
    #[serde(with = "millis")]
    pub wall_clock: Duration,
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

fn stub_of(content: &InlineContent) -> ContentAddress {
    ContentAddress::of(&canonical::to_canonical_bytes(content).expect("inline content is finite JSON"))
}

/// Replace inline input and output bodies with the content address of
/// their canonical bytes. `None` if the fragment carries no inline body.
pub fn stub_inline_bodies(env: &FragmentEnvelope) -> Option<FragmentEnvelope> {
    let mut out = env.clone();
    match &mut out.payload {
        Payload::Start(s) => {
            let content = s.inputs.content.take()?;
            s.inputs.mode = InputMode::Reference;
            s.inputs.content_address = Some(stub_of(&content));
        }
        Payload::Output(o) => match &o.body {
            Body::Inline(c) => o.body = Body::Reference(stub_of(c)),
            Body::Reference(_) => return None,
        },
        _ => return None,
    }
    Some(out)
}

/// Blob digests a fragment refers to.
pub(crate) fn referenced_blobs(env: &FragmentEnvelope) -> Vec<String> {
    match &env.payload {
        Payload::Start(s) => s.inputs.content_address.iter().map(|a| a.digest.clone()).collect(),
        Payload::Artifact(a) => match &a.body {
            Body::Reference(r) => vec![r.digest.clone()],
            Body::Inline(_) => vec![],
        },
        Payload::Output(o) => match &o.body {
            Body::Reference(r) => vec![r.digest.clone()],
            Body::Inline(_) => vec![],
        },
        _ => vec![],
    }
}

fn expired(at: Timestamp, now: Timestamp, ttl: TimeDelta) -> bool {
    at.until(now) > ttl
}

impl Store {
    /// Apply tiered retention at time `now`. Runs exclusively: readers see
    /// the state before or after the pass, never in between.
    pub fn compact(&self, now: Timestamp, policy: &RetentionPolicy) -> Result<CompactionReport, StoreError> {
        policy.validate()?;
        self.check_writable()?;
        let started = Instant::now();
        let mut w = self.writer.lock();
        let mut index = self.index.write();

        let mut report = CompactionReport {
            now,
            fragments_removed: TierCounts::default(),
            blobs_removed: 0,
            summaries_written: 0,
            skipped: Vec::new(),
            wall_clock: Duration::ZERO,
        };
        let mut kept: Vec<(u64, LogRecord)> = Vec::new();
        let mut tombstones: Vec<Tombstone> = index
            .dedup
            .iter()
            .filter(|(_, d)| !d.live)
            .map(|(fid, d)| Tombstone {
                fragment_id: fid.clone(),
                event_id: d.event_id.clone(),
                hash: hex::encode(d.hash),
            })
            .collect();
        let mut summaries = index.summaries.clone();
        let mut live_blobs: HashSet<String> = HashSet::new();

        let mut events: Vec<&String> = index.events.keys().collect();
        events.sort();
        for event_id in events {
            let frags = &index.events[event_id];
            let start = frags
                .values()
                .find(|s| s.fragment.kind() == FragmentKind::Start)
                .and_then(|s| match &s.fragment.envelope().payload {
                    Payload::Start(p) => Some(p.header.invoked_at),
                    _ => None,
                });
            let tomb = |s: &super::StoredFragment| Tombstone {
                fragment_id: s.fragment.fragment_id().to_owned(),
                event_id: event_id.clone(),
                hash: hex::encode(s.original_hash),
            };

            if let Some(invoked_at) = start {
                if expired(invoked_at, now, policy.tier_summary_ttl) {
                    let assembled = assemble(frags.values().map(|s| s.fragment.clone()));
                    let rec = assembled.records.into_values().next().expect("event has a start");
                    summaries.insert(event_id.clone(), RecordSummary::of(&rec, now));
                    report.summaries_written += 1;
                    report.fragments_removed.summary += frags.len() as u64;
                    tombstones.extend(frags.values().map(tomb));
                    continue;
                }
            } else if frags
                .values()
                .all(|s| expired(s.fragment.envelope().emitted_at, now, policy.tier_summary_ttl))
            {
                report.skipped.push(event_id.clone());
            }

            for s in frags.values() {
                let env = s.fragment.envelope();
                if s.fragment.kind() == FragmentKind::Artifact
                    && expired(env.emitted_at, now, policy.tier_artifact_ttl)
                {
                    report.fragments_removed.artifact += 1;
                    tombstones.push(tomb(s));
                    continue;
                }
                let content_expired = expired(env.emitted_at, now, policy.tier_content_ttl)
                    && matches!(s.fragment.kind(), FragmentKind::Start | FragmentKind::Output);
                if !content_expired {
                    live_blobs.extend(referenced_blobs(env));
                    kept.push((s.position, record_for(s.fragment.clone(), s.original_hash)));
                    continue;
                }
                match stub_inline_bodies(env) {
                    Some(stubbed) => {
                        report.fragments_removed.content += 1;
                        let f = Fragment::new(stubbed).expect("stubbing preserves validity");
                        kept.push((s.position, LogRecord::Stubbed {
                            original_hash: s.original_hash,
                            fragment: f,
                        }));
                    }
                    // Already a reference; its blob is no longer kept alive.
                    None => kept.push((s.position, record_for(s.fragment.clone(), s.original_hash))),
                }
            }
        }
        // Write the next generation, then flip CURRENT.
        let next_gen = w.generation + 1;
        let dir = generation_dir(&self.root, next_gen);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let mut entries: Vec<(u64, LogRecord)> = kept;
        entries.sort_by_key(|(p, _)| *p);
        let mut pos = w.log.next_position();
        tombstones.sort_by(|a, b| a.fragment_id.cmp(&b.fragment_id));
        for t in tombstones {
            entries.push((pos, LogRecord::Tombstone(t)));
            pos += 1;
        }
        for s in summaries.into_values() {
            entries.push((pos, LogRecord::Summary(s)));
            pos += 1;
        }
        // Positions stay unique across generations.
        entries.push((pos, LogRecord::Checkpoint));
        let (mut log, _) = SegmentLog::open_with_floor(&dir, self.config.max_segment_bytes, 0)?;
        for (p, rec) in &entries {
            log.append_at(*p, &rec.encode())?;
        }
        log.sync()?;
        crate::segment::sync_dir(&dir)?;
        generations::commit(&self.root.join("log"), next_gen)?;

        let old_dir = generation_dir(&self.root, w.generation);
        let mut rebuilt = Index::default();
        for (p, rec) in entries {
            rebuilt.apply(p, rec);
        }
        *index = rebuilt;
        w.log = log;
        w.generation = next_gen;
        self.written_upto
            .store(w.log.next_position(), std::sync::atomic::Ordering::SeqCst);
        drop(index);
        drop(w);
        fs::remove_dir_all(old_dir)?;

        for digest in self.blobs.list()? {
            if !live_blobs.contains(&digest) && self.blobs.delete(&digest)? {
                report.blobs_removed += 1;
            }
        }
        report.wall_clock = started.elapsed();
        Ok(report)
    }
}

fn record_for(fragment: Fragment, original_hash: [u8; 32]) -> LogRecord {
    if *fragment.hash() == original_hash {
        LogRecord::Fragment(fragment)
    } else {
        LogRecord::Stubbed { original_hash, fragment }
    }
}
