//! Order-insensitive folding of fragments into records.
//!
//! A start fragment opens a record; append-kind fragments are folded into
//! the matching list. Appends that arrive before their start are held in
//! quarantine until the start shows up or their deadline passes.

mod run_tree;

use std::collections::{BTreeMap, HashMap};

use chrono::TimeDelta;

use crate::record::{validate_fragment, Fragment, FragmentEnvelope, FragmentKind, MedLogRecord, Violations};
use crate::time::Timestamp;

pub use run_tree::{build_run_tree, build_run_tree_from_headers, RunTree, RunTreeError};

pub const DEFAULT_ORPHAN_TTL: TimeDelta = TimeDelta::hours(72);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApplyOutcome {
    /// A new record was opened; quarantined orphans were folded into it.
    Opened { folded_orphans: usize },
    Appended,
    /// Already folded (or already quarantined) with identical bytes.
    Duplicate,
    Quarantined { deadline: Timestamp },
    /// Rejected; the state is unchanged.
    Conflict { reason: String },
}

impl ApplyOutcome {
    /// True if applying would change the state.
    pub fn is_effective(&self) -> bool {
        matches!(
            self,
            ApplyOutcome::Opened { .. } | ApplyOutcome::Appended | ApplyOutcome::Quarantined { .. }
        )
    }
}

#[derive(Debug, Clone)]
pub struct Orphan {
    pub fragment: Fragment,
    pub deadline: Timestamp,
}

#[derive(Debug, Clone)]
struct EventState {
    record: MedLogRecord,
    /// fragment_id -> canonical hash of everything folded into the record.
    seen: HashMap<String, [u8; 32]>,
}

#[derive(Debug, Clone)]
pub struct AssemblyState {
    events: HashMap<String, EventState>,
    orphans: HashMap<String, Vec<Orphan>>,
    orphan_ttl: TimeDelta,
}

impl Default for AssemblyState {
    fn default() -> Self {
        Self::new(DEFAULT_ORPHAN_TTL)
    }
}

impl AssemblyState {
    pub fn new(orphan_ttl: TimeDelta) -> Self {
        AssemblyState {
            events: HashMap::new(),
            orphans: HashMap::new(),
            orphan_ttl,
        }
    }

    pub fn orphan_ttl(&self) -> TimeDelta {
        self.orphan_ttl
    }

    /// What `apply` would do, without doing it.
    pub fn preview(&self, f: &Fragment, now: Timestamp) -> ApplyOutcome {
        let eid = f.event_id();
        if let Some(ev) = self.events.get(eid) {
            return match ev.seen.get(f.fragment_id()) {
                Some(h) if h == f.hash() => ApplyOutcome::Duplicate,
                Some(_) => ApplyOutcome::Conflict {
                    reason: format!("fragment_id {:?} reused with different content", f.fragment_id()),
                },
                None if f.kind() == FragmentKind::Start => ApplyOutcome::Conflict {
                    reason: format!("event {eid:?} already started with a different start message"),
                },
                None => ApplyOutcome::Appended,
            };
        }
        let held = self.orphans.get(eid).map(Vec::as_slice).unwrap_or_default();
        if let Some(o) = held.iter().find(|o| o.fragment.fragment_id() == f.fragment_id()) {
            return if o.fragment.hash() == f.hash() {
                ApplyOutcome::Duplicate
            } else {
                ApplyOutcome::Conflict {
                    reason: format!("fragment_id {:?} reused with different content", f.fragment_id()),
                }
            };
        }
        if f.kind() == FragmentKind::Start {
            ApplyOutcome::Opened {
                folded_orphans: held.len(),
            }
        } else {
            ApplyOutcome::Quarantined {
                deadline: now.saturating_add(self.orphan_ttl),
            }
        }
    }

    /// Fold one validated fragment.
    pub fn apply(&mut self, f: &Fragment, now: Timestamp) -> ApplyOutcome {
        let outcome = self.preview(f, now);
        match &outcome {
            ApplyOutcome::Opened { .. } => {
                let mut ev = EventState {
                    record: MedLogRecord::from_start(f.envelope()),
                    seen: HashMap::from([(f.fragment_id().to_owned(), *f.hash())]),
                };
                if let Some(mut held) = self.orphans.remove(f.event_id()) {
                    held.sort_by(|a, b| a.fragment.sort_key().cmp(&b.fragment.sort_key()));
                    for o in held {
                        ev.record.push(o.fragment.envelope());
                        ev.seen.insert(o.fragment.fragment_id().to_owned(), *o.fragment.hash());
                    }
                }
                self.events.insert(f.event_id().to_owned(), ev);
            }
            ApplyOutcome::Appended => {
                let ev = self.events.get_mut(f.event_id()).expect("previewed as known");
                ev.record.push(f.envelope());
                ev.seen.insert(f.fragment_id().to_owned(), *f.hash());
            }
            ApplyOutcome::Quarantined { deadline } => {
                self.orphans
                    .entry(f.event_id().to_owned())
                    .or_default()
                    .push(Orphan {
                        fragment: f.clone(),
                        deadline: *deadline,
                    });
            }
            ApplyOutcome::Duplicate | ApplyOutcome::Conflict { .. } => {}
        }
        outcome
    }

    /// Remove and return every orphan whose deadline is strictly before `now`.
    pub fn expire_orphans(&mut self, now: Timestamp) -> Vec<Fragment> {
        let mut expired = Vec::new();
        self.orphans.retain(|_, held| {
            held.retain(|o| {
                if o.deadline < now {
                    expired.push(o.fragment.clone());
                    false
                } else {
                    true
                }
            });
            !held.is_empty()
        });
        expired.sort_by(|a, b| {
            (a.event_id(), a.sort_key()).cmp(&(b.event_id(), b.sort_key()))
        });
        expired
    }

    pub fn record(&self, event_id: &str) -> Option<&MedLogRecord> {
        self.events.get(event_id).map(|e| &e.record)
    }

    pub fn records(&self) -> impl Iterator<Item = &MedLogRecord> {
        self.events.values().map(|e| &e.record)
    }

    pub fn record_count(&self) -> usize {
        self.events.len()
    }

    /// fragment_ids folded into the record for `event_id`.
    pub fn seen(&self, event_id: &str) -> Option<impl Iterator<Item = &str>> {
        self.events
            .get(event_id)
            .map(|e| e.seen.keys().map(String::as_str))
    }

    pub fn is_started(&self, event_id: &str) -> bool {
        self.events.contains_key(event_id)
    }

    pub fn orphans(&self, event_id: &str) -> &[Orphan] {
        self.orphans.get(event_id).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn orphan_count(&self) -> usize {
        self.orphans.values().map(Vec::len).sum()
    }

    pub fn orphan_events(&self) -> impl Iterator<Item = &str> {
        self.orphans.keys().map(String::as_str)
    }
}

/// Value-style fold step: validates, then applies to an owned state.
/// An invalid envelope is rejected without touching the state.
pub fn apply_fragment(
    mut state: AssemblyState,
    env: FragmentEnvelope,
    now: Timestamp,
) -> Result<(AssemblyState, ApplyOutcome), Violations> {
    validate_fragment(&env)?;
    let f = Fragment::new(env).map_err(|e| match e {
        crate::record::FragmentError::Invalid(v) => v,
        other => Violations(vec![crate::record::Violation {
            field: "payload".into(),
            rule: other.to_string(),
        }]),
    })?;
    let outcome = state.apply(&f, now);
    Ok((state, outcome))
}

/// Result of assembling a finite fragment multiset.
#[derive(Debug, Clone, Default)]
pub struct Assembled {
    pub records: BTreeMap<String, MedLogRecord>,
    /// Fragments of events whose start is not in the multiset.
    pub unassemblable: BTreeMap<String, Vec<Fragment>>,
}

/// Fold a complete multiset. Fragments are processed in
/// (kind, sequence, fragment_id) order, which for a conflict-free multiset
/// gives the same records as any other fold order.
pub fn assemble<I>(fragments: I) -> Assembled
where
    I: IntoIterator<Item = Fragment>,
{
    let mut frags: Vec<Fragment> = fragments.into_iter().collect();
    frags.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let now = Timestamp::from_millis(0);
    let mut state = AssemblyState::new(TimeDelta::MAX);
    for f in &frags {
        state.apply(f, now);
    }
    let unassemblable = state
        .orphans
        .into_iter()
        .map(|(k, held)| (k, held.into_iter().map(|o| o.fragment).collect()))
        .collect();
    Assembled {
        records: state.events.into_iter().map(|(k, e)| (k, e.record)).collect(),
        unassemblable,
    }
}
