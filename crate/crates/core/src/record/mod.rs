//! The nine-field record model: fragment envelopes, payloads, assembled
//! records, validation, canonical encoding and conformance profiles.

mod assembled;
mod fragment;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

pub use assembled::{
    conformance_level, record_digest, ConformanceProfile, Digest, Entry, FieldSet, MedLogRecord,
    RecordField, RecordStatus, StartMeta,
};
pub use fragment::{canonicalize, DecodeError, Fragment, FragmentError};
pub use validate::{validate_fragment, Violation, Violations};

/// Protocol version token carried by every envelope in this release.
pub const SPEC_VERSION: &str = "medlog/0.1";

/// Upper bound on `event_id`, `fragment_id` and other identifier lengths.
pub const MAX_ID_LEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FragmentKind {
    Start,
    Artifact,
    Output,
    Outcome,
    Feedback,
}

impl FragmentKind {
    pub const ALL: [FragmentKind; 5] = [
        FragmentKind::Start,
        FragmentKind::Artifact,
        FragmentKind::Output,
        FragmentKind::Outcome,
        FragmentKind::Feedback,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FragmentKind::Start => "start",
            FragmentKind::Artifact => "artifact",
            FragmentKind::Output => "output",
            FragmentKind::Outcome => "outcome",
            FragmentKind::Feedback => "feedback",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Everything except `start` appends to an existing record.
    pub fn is_append(&self) -> bool {
        !matches!(self, FragmentKind::Start)
    }
}

impl fmt::Display for FragmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One immutable protocol message.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FragmentEnvelope {
    pub spec_version: String,
    pub event_id: String,
    pub fragment_id: String,
    pub fragment_kind: FragmentKind,
    pub sequence: u64,
    pub emitted_at: Timestamp,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Payload {
    Start(StartPayload),
    Artifact(ArtifactPayload),
    Output(OutputPayload),
    Outcome(OutcomePayload),
    Feedback(FeedbackPayload),
}

impl Payload {
    pub fn kind(&self) -> FragmentKind {
        match self {
            Payload::Start(_) => FragmentKind::Start,
            Payload::Artifact(_) => FragmentKind::Artifact,
            Payload::Output(_) => FragmentKind::Output,
            Payload::Outcome(_) => FragmentKind::Outcome,
            Payload::Feedback(_) => FragmentKind::Feedback,
        }
    }

    /// Decode a payload as the given kind.
    pub fn from_value(kind: FragmentKind, v: serde_json::Value) -> serde_json::Result<Payload> {
        Ok(match kind {
            FragmentKind::Start => Payload::Start(serde_json::from_value(v)?),
            FragmentKind::Artifact => Payload::Artifact(serde_json::from_value(v)?),
            FragmentKind::Output => Payload::Output(serde_json::from_value(v)?),
            FragmentKind::Outcome => Payload::Outcome(serde_json::from_value(v)?),
            FragmentKind::Feedback => Payload::Feedback(serde_json::from_value(v)?),
        })
    }
}

/// The composite initial message of an invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPayload {
    pub header: Header,
    pub model: ModelInstance,
    pub user: UserIdentity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetIdentity>,
    pub inputs: Inputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub server_id: String,
    pub invoked_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_retrieved_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_event_id: Option<String>,
    pub spec_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInstance {
    pub model_id: String,
    pub model_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_card_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_sheet_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_data_version: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrieval_sources: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_time_edits: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrincipalKind {
    Human,
    Service,
    Agent,
    ScheduledJob,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Principal {
    pub kind: PrincipalKind,
    pub id: String,
    pub id_system: String,
}

/// Ordered from the immediate caller to the most upstream initiator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserIdentity {
    pub chain: Vec<Principal>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Patient,
    Claim,
    Encounter,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetIdentity {
    pub kind: TargetKind,
    pub id: String,
    pub id_system: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Inline,
    Reference,
}

/// Inline content: free text or a key-value map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InlineContent {
    Text(String),
    Map(BTreeMap<String, serde_json::Value>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub mode: InputMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<InlineContent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_address: Option<ContentAddress>,
    pub media_type: String,
    /// Structured numeric features, consumed by the drift monitor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<BTreeMap<String, f64>>,
}

/// Hash-based reference to a payload stored once in the blob store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentAddress {
    pub algorithm: String,
    pub digest: String,
    pub size: u64,
}

pub const CONTENT_ALGORITHM: &str = "sha-256";

impl ContentAddress {
    pub fn of(bytes: &[u8]) -> Self {
        use sha2::Digest as _;
        ContentAddress {
            algorithm: CONTENT_ALGORITHM.to_owned(),
            digest: hex::encode(sha2::Sha256::digest(bytes)),
            size: bytes.len() as u64,
        }
    }
}

impl fmt::Display for ContentAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.algorithm, self.digest)
    }
}

/// Inline content or a content-addressed reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Body {
    Inline(InlineContent),
    Reference(ContentAddress),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    ReasoningTrace,
    RetrievalContext,
    AgentTrace,
    Uncertainty,
    Interpretability,
    ModelStateSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactPayload {
    pub artifact_kind: ArtifactKind,
    pub body: Body,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputModality {
    Prediction,
    Text,
    ImageRef,
    Recommendation,
    Explanation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPayload {
    pub modality: OutputModality,
    pub body: Body,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_score: Option<f64>,
    #[serde(default)]
    pub triage_flag: bool,
    /// Marks the final output of the invocation.
    #[serde(default)]
    pub terminal: bool,
    #[serde(default)]
    pub failure: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkageBasis {
    Attestation,
    TemporalProximity,
    AutomatedQuery,
    TrialEmulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomePayload {
    pub action_taken: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_result: Option<String>,
    pub observed_at: Timestamp,
    pub linkage_basis: LinkageBasis,
    pub linkage_strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rater: Option<Principal>,
}
