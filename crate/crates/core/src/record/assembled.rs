use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use super::*;
use crate::canonical;

/// 32-byte SHA-256 digest, rendered as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex characters"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Open,
    Failed,
    Completed,
}

impl RecordStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordStatus::Open => "open",
            RecordStatus::Failed => "failed",
            RecordStatus::Completed => "completed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "open" => Some(RecordStatus::Open),
            "failed" => Some(RecordStatus::Failed),
            "completed" => Some(RecordStatus::Completed),
            _ => None,
        }
    }
}

/// Envelope metadata of the start fragment, kept so the record can be
/// turned back into its constituent fragments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartMeta {
    pub fragment_id: String,
    pub sequence: u64,
    pub emitted_at: Timestamp,
}

/// One appended fragment inside a record list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry<P> {
    pub fragment_id: String,
    pub sequence: u64,
    pub emitted_at: Timestamp,
    pub payload: P,
}

impl<P> Entry<P> {
    fn key(&self) -> (u64, &str) {
        (self.sequence, &self.fragment_id)
    }
}

/// The assembled record of one model invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MedLogRecord {
    pub event_id: String,
    pub spec_version: String,
    pub start: StartMeta,
    pub header: Header,
    pub model: ModelInstance,
    pub user: UserIdentity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetIdentity>,
    pub inputs: Inputs,
    pub artifacts: Vec<Entry<ArtifactPayload>>,
    pub outputs: Vec<Entry<OutputPayload>>,
    pub outcomes: Vec<Entry<OutcomePayload>>,
    pub feedback: Vec<Entry<FeedbackPayload>>,
    pub status: RecordStatus,
}

fn insert_sorted<P>(list: &mut Vec<Entry<P>>, entry: Entry<P>) {
    let idx = list.partition_point(|e| e.key() < entry.key());
    list.insert(idx, entry);
}

impl MedLogRecord {
    /// A fresh open record from a start envelope. Panics if the payload is
    /// not a start payload; callers hold validated fragments.
    pub fn from_start(env: &FragmentEnvelope) -> Self {
        let Payload::Start(p) = &env.payload else {
            panic!("from_start called with a {} payload", env.payload.kind());
        };
        MedLogRecord {
            event_id: env.event_id.clone(),
            spec_version: env.spec_version.clone(),
            start: StartMeta {
                fragment_id: env.fragment_id.clone(),
                sequence: env.sequence,
                emitted_at: env.emitted_at,
            },
            header: p.header.clone(),
            model: p.model.clone(),
            user: p.user.clone(),
            target: p.target.clone(),
            inputs: p.inputs.clone(),
            artifacts: Vec::new(),
            outputs: Vec::new(),
            outcomes: Vec::new(),
            feedback: Vec::new(),
            status: RecordStatus::Open,
        }
    }

    /// Fold an append-kind envelope into the matching list, keeping the
    /// (sequence, fragment_id) order. Start envelopes are ignored.
    pub fn push(&mut self, env: &FragmentEnvelope) {
        macro_rules! entry {
            ($p:expr) => {
                Entry {
                    fragment_id: env.fragment_id.clone(),
                    sequence: env.sequence,
                    emitted_at: env.emitted_at,
                    payload: $p.clone(),
                }
            };
        }
        match &env.payload {
            Payload::Start(_) => {}
            Payload::Artifact(p) => insert_sorted(&mut self.artifacts, entry!(p)),
            Payload::Output(p) => insert_sorted(&mut self.outputs, entry!(p)),
            Payload::Outcome(p) => insert_sorted(&mut self.outcomes, entry!(p)),
            Payload::Feedback(p) => insert_sorted(&mut self.feedback, entry!(p)),
        }
        self.status = self.derived_status();
    }

    /// Status follows the first terminal output in list order, so it does
    /// not depend on arrival order.
    pub fn derived_status(&self) -> RecordStatus {
        match self.outputs.iter().find(|o| o.payload.terminal) {
            Some(o) if o.payload.failure => RecordStatus::Failed,
            Some(_) => RecordStatus::Completed,
            None => RecordStatus::Open,
        }
    }

    pub fn contains_fragment(&self, fragment_id: &str) -> bool {
        self.start.fragment_id == fragment_id
            || self.artifacts.iter().any(|e| e.fragment_id == fragment_id)
            || self.outputs.iter().any(|e| e.fragment_id == fragment_id)
            || self.outcomes.iter().any(|e| e.fragment_id == fragment_id)
            || self.feedback.iter().any(|e| e.fragment_id == fragment_id)
    }

    pub fn fragment_count(&self) -> usize {
        1 + self.artifacts.len() + self.outputs.len() + self.outcomes.len() + self.feedback.len()
    }

    /// Rebuild the envelopes this record was folded from.
    pub fn to_envelopes(&self) -> Vec<FragmentEnvelope> {
        let mk = |kind, e_id: &str, seq, at, payload| FragmentEnvelope {
            spec_version: self.spec_version.clone(),
            event_id: self.event_id.clone(),
            fragment_id: e_id.to_owned(),
            fragment_kind: kind,
            sequence: seq,
            emitted_at: at,
            payload,
        };
        let mut out = Vec::with_capacity(self.fragment_count());
        out.push(mk(
            FragmentKind::Start,
            &self.start.fragment_id,
            self.start.sequence,
            self.start.emitted_at,
            Payload::Start(StartPayload {
                header: self.header.clone(),
                model: self.model.clone(),
                user: self.user.clone(),
                target: self.target.clone(),
                inputs: self.inputs.clone(),
            }),
        ));
        for e in &self.artifacts {
            out.push(mk(
                FragmentKind::Artifact,
                &e.fragment_id,
                e.sequence,
                e.emitted_at,
                Payload::Artifact(e.payload.clone()),
            ));
        }
        for e in &self.outputs {
            out.push(mk(
                FragmentKind::Output,
                &e.fragment_id,
                e.sequence,
                e.emitted_at,
                Payload::Output(e.payload.clone()),
            ));
        }
        for e in &self.outcomes {
            out.push(mk(
                FragmentKind::Outcome,
                &e.fragment_id,
                e.sequence,
                e.emitted_at,
                Payload::Outcome(e.payload.clone()),
            ));
        }
        for e in &self.feedback {
            out.push(mk(
                FragmentKind::Feedback,
                &e.fragment_id,
                e.sequence,
                e.emitted_at,
                Payload::Feedback(e.payload.clone()),
            ));
        }
        out
    }

    /// Check the record-level invariants: list order, unique fragment ids,
    /// a status consistent with the outputs, and valid constituents.
    pub fn validate(&self) -> Result<(), Violations> {
        let mut v = Vec::new();
        fn sorted<P>(name: &str, l: &[Entry<P>], v: &mut Vec<Violation>) {
            if l.windows(2).any(|w| w[0].key() >= w[1].key()) {
                v.push(Violation {
                    field: name.to_owned(),
                    rule: "must be strictly sorted by (sequence, fragment_id)".into(),
                });
            }
        }
        sorted("artifacts", &self.artifacts, &mut v);
        sorted("outputs", &self.outputs, &mut v);
        sorted("outcomes", &self.outcomes, &mut v);
        sorted("feedback", &self.feedback, &mut v);

        let envs = self.to_envelopes();
        let mut ids = HashSet::new();
        for env in &envs {
            if !ids.insert(env.fragment_id.as_str()) {
                v.push(Violation {
                    field: "fragment_id".into(),
                    rule: format!("duplicate fragment_id {:?}", env.fragment_id),
                });
            }
            if let Err(errs) = validate_fragment(env) {
                for e in errs.0 {
                    v.push(Violation {
                        field: format!("{}[{}].{}", env.fragment_kind, env.fragment_id, e.field),
                        rule: e.rule,
                    });
                }
            }
        }
        if self.status != self.derived_status() {
            v.push(Violation {
                field: "status".into(),
                rule: "inconsistent with terminal outputs".into(),
            });
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Violations(v))
        }
    }

    pub fn populated_fields(&self) -> FieldSet {
        let mut s = FieldSet::EMPTY;
        let mut set = |f, on: bool| {
            if on {
                s = s.with(f);
            }
        };
        set(RecordField::Header, !self.header.server_id.trim().is_empty());
        set(
            RecordField::Model,
            !self.model.model_id.is_empty() && !self.model.model_version.is_empty(),
        );
        set(RecordField::User, !self.user.chain.is_empty());
        set(RecordField::Target, self.target.is_some());
        set(
            RecordField::Inputs,
            self.inputs.content.is_some()
                || self.inputs.content_address.is_some()
                || self.inputs.features.as_ref().is_some_and(|f| !f.is_empty()),
        );
        set(RecordField::Artifacts, !self.artifacts.is_empty());
        set(RecordField::Outputs, !self.outputs.is_empty());
        set(RecordField::Outcomes, !self.outcomes.is_empty());
        set(RecordField::Feedback, !self.feedback.is_empty());
        s
    }
}

/// The nine record fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum RecordField {
    Header = 1 << 0,
    Model = 1 << 1,
    User = 1 << 2,
    Target = 1 << 3,
    Inputs = 1 << 4,
    Artifacts = 1 << 5,
    Outputs = 1 << 6,
    Outcomes = 1 << 7,
    Feedback = 1 << 8,
}

impl RecordField {
    pub const ALL: [RecordField; 9] = [
        RecordField::Header,
        RecordField::Model,
        RecordField::User,
        RecordField::Target,
        RecordField::Inputs,
        RecordField::Artifacts,
        RecordField::Outputs,
        RecordField::Outcomes,
        RecordField::Feedback,
    ];
}

/// Set of populated record fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FieldSet(u16);

impl FieldSet {
    pub const EMPTY: FieldSet = FieldSet(0);
    pub const ALL: FieldSet = FieldSet(0x1ff);

    pub fn of(fields: &[RecordField]) -> Self {
        fields.iter().fold(Self::EMPTY, |s, f| s.with(*f))
    }

    pub fn from_bits(bits: u16) -> Self {
        FieldSet(bits & Self::ALL.0)
    }

    pub fn with(self, f: RecordField) -> Self {
        FieldSet(self.0 | f as u16)
    }

    pub fn contains(self, f: RecordField) -> bool {
        self.0 & f as u16 != 0
    }

    fn contains_all(self, fields: &[RecordField]) -> bool {
        fields.iter().all(|f| self.contains(*f))
    }
}

/// Completeness tier, totally ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConformanceProfile {
    Nonconformant,
    Minimal,
    Standard,
    Full,
}

impl ConformanceProfile {
    pub fn classify(fields: FieldSet) -> Self {
        use RecordField::*;
        if fields == FieldSet::ALL {
            ConformanceProfile::Full
        } else if fields.contains_all(&[Header, Model, Outputs, User, Inputs]) {
            ConformanceProfile::Standard
        } else if fields.contains_all(&[Header, Model, Outputs]) {
            ConformanceProfile::Minimal
        } else {
            ConformanceProfile::Nonconformant
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ConformanceProfile::Nonconformant => "nonconformant",
            ConformanceProfile::Minimal => "minimal",
            ConformanceProfile::Standard => "standard",
            ConformanceProfile::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ConformanceProfile::Nonconformant,
            ConformanceProfile::Minimal,
            ConformanceProfile::Standard,
            ConformanceProfile::Full,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    }
}

impl fmt::Display for ConformanceProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn conformance_level(rec: &MedLogRecord) -> ConformanceProfile {
    ConformanceProfile::classify(rec.populated_fields())
}

/// SHA-256 over the canonical encodings of the record's fragments, sorted
/// by (fragment_kind, sequence, fragment_id). Each encoding is preceded by
/// its length as a big-endian u64.
pub fn record_digest(rec: &MedLogRecord) -> Digest {
    let mut parts: Vec<(FragmentKind, u64, String, Vec<u8>)> = rec
        .to_envelopes()
        .into_iter()
        .map(|env| {
            // Records built by hand may not validate; hash them anyway.
            let bytes = canonical::to_canonical_bytes(&env).unwrap_or_default();
            (env.fragment_kind, env.sequence, env.fragment_id, bytes)
        })
        .collect();
    parts.sort_by(|a, b| (a.0, a.1, &a.2).cmp(&(b.0, b.1, &b.2)));
    let mut h = Sha256::new();
    for (_, _, _, bytes) in &parts {
        h.update((bytes.len() as u64).to_be_bytes());
        h.update(bytes);
    }
    Digest(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit;
    use RecordField::*;

    #[test]
    fn profile_fixtures() {
        assert_eq!(
            ConformanceProfile::classify(FieldSet::of(&[Header, Model, Outputs])),
            ConformanceProfile::Minimal
        );
        assert_eq!(
            ConformanceProfile::classify(FieldSet::of(&[Header, Model, Outputs, User, Inputs])),
            ConformanceProfile::Standard
        );
        assert_eq!(
            ConformanceProfile::classify(FieldSet::ALL),
            ConformanceProfile::Full
        );
        assert_eq!(
            ConformanceProfile::classify(FieldSet::of(&[Header])),
            ConformanceProfile::Nonconformant
        );
    }

    #[test]
    fn profile_is_monotone_over_every_field_set() {
        for bits in 0..=0x1ffu16 {
            let s = FieldSet::from_bits(bits);
            for f in RecordField::ALL {
                assert!(
                    ConformanceProfile::classify(s.with(f)) >= ConformanceProfile::classify(s),
                    "adding {f:?} to {s:?}"
                );
            }
        }
    }

    #[test]
    fn start_only_record_is_open_and_nonconformant() {
        let rec = MedLogRecord::from_start(&testkit::start_env("e1", "s1"));
        assert_eq!(rec.status, RecordStatus::Open);
        assert_eq!(conformance_level(&rec), ConformanceProfile::Nonconformant);
    }

    #[test]
    fn first_terminal_output_sets_status() {
        let mut rec = MedLogRecord::from_start(&testkit::start_env("e1", "s1"));
        rec.push(&testkit::output_env("e1", "o2", 2, true, false));
        assert_eq!(rec.status, RecordStatus::Completed);
        // A failed terminal output with a lower sequence takes precedence.
        rec.push(&testkit::output_env("e1", "o1", 1, true, true));
        assert_eq!(rec.status, RecordStatus::Failed);
    }

    #[test]
    fn digest_is_arrival_order_insensitive_and_input_sensitive() {
        let start = testkit::start_env("e1", "s1");
        let out = testkit::output_env("e1", "o1", 1, true, false);
        let fb = testkit::feedback_env("e1", "fb1", 2);

        let mut a = MedLogRecord::from_start(&start);
        a.push(&out);
        a.push(&fb);
        let mut b = MedLogRecord::from_start(&start);
        b.push(&fb);
        b.push(&out);
        assert_eq!(record_digest(&a), record_digest(&b));

        let before = record_digest(&a);
        a.push(&testkit::feedback_env("e1", "fb2", 3));
        assert_ne!(before, record_digest(&a));
    }

    #[test]
    fn record_json_round_trips_and_validates() {
        let mut rec = MedLogRecord::from_start(&testkit::start_env("e1", "s1"));
        rec.push(&testkit::artifact_env("e1", "a1", 1));
        rec.push(&testkit::output_env("e1", "o1", 2, true, false));
        let json = serde_json::to_string(&rec).unwrap();
        let back: MedLogRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        back.validate().unwrap();
    }

    #[test]
    fn validate_catches_unsorted_lists() {
        let mut rec = MedLogRecord::from_start(&testkit::start_env("e1", "s1"));
        rec.push(&testkit::feedback_env("e1", "f1", 1));
        rec.push(&testkit::feedback_env("e1", "f2", 2));
        rec.feedback.swap(0, 1);
        let err = rec.validate().unwrap_err();
        assert!(err.to_string().contains("strictly sorted"));
    }
}
