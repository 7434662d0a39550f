use std::sync::Arc;

use serde::{Deserialize, Deserializer};
use serde_json::Value;
use sha2::{Digest as _, Sha256};

use super::*;
use crate::canonical::{self, CanonicalError};

#[derive(Debug, thiserror::Error)]
pub enum FragmentError {
    #[error("cannot canonicalize invalid fragment: {0}")]
    Invalid(#[from] Violations),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("undecodable fragment: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid fragment: {0}")]
    Invalid(Violations),
}

impl DecodeError {
    /// Human-readable violation list, one entry per broken rule.
    pub fn messages(&self) -> Vec<String> {
        match self {
            DecodeError::Json(e) => vec![e.to_string()],
            DecodeError::Invalid(v) => v.messages(),
        }
    }
}

impl From<FragmentError> for DecodeError {
    fn from(e: FragmentError) -> Self {
        match e {
            FragmentError::Invalid(v) => DecodeError::Invalid(v),
            FragmentError::Canonical(CanonicalError::Serialize(e)) => DecodeError::Json(e),
            FragmentError::Canonical(CanonicalError::NonFinite) => {
                DecodeError::Invalid(Violations(vec![Violation {
                    field: "payload".into(),
                    rule: "numbers must be finite".into(),
                }]))
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvelope {
    spec_version: String,
    event_id: String,
    fragment_id: String,
    fragment_kind: FragmentKind,
    sequence: u64,
    emitted_at: Timestamp,
    payload: Value,
}

impl<'de> Deserialize<'de> for FragmentEnvelope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawEnvelope::deserialize(d)?;
        let payload = decode_payload(raw.fragment_kind, raw.payload)
            .map_err(serde::de::Error::custom)?;
        Ok(FragmentEnvelope {
            spec_version: raw.spec_version,
            event_id: raw.event_id,
            fragment_id: raw.fragment_id,
            fragment_kind: raw.fragment_kind,
            sequence: raw.sequence,
            emitted_at: raw.emitted_at,
            payload,
        })
    }
}

fn decode_payload(kind: FragmentKind, v: Value) -> Result<Payload, String> {
    match Payload::from_value(kind, v.clone()) {
        Ok(p) => Ok(p),
        Err(e) => {
            let other = FragmentKind::ALL
                .into_iter()
                .filter(|k| *k != kind)
                .find(|k| Payload::from_value(*k, v.clone()).is_ok());
            Err(match other {
                Some(o) => format!(
                    "payload/kind mismatch: fragment_kind is {kind} but payload is a {o} payload"
                ),
                None => format!("invalid {kind} payload: {e}"),
            })
        }
    }
}

/// Canonical bytes of a valid envelope.
pub fn canonicalize(env: &FragmentEnvelope) -> Result<Vec<u8>, FragmentError> {
    validate_fragment(env)?;
    Ok(canonical::to_canonical_bytes(env)?)
}

/// A validated envelope together with its canonical bytes and their SHA-256.
///
/// Everything past the ingestion boundary works on `Fragment`s, so the
/// canonical form is computed once.
#[derive(Debug, Clone)]
pub struct Fragment {
    inner: Arc<FragmentInner>,
}

#[derive(Debug)]
struct FragmentInner {
    envelope: FragmentEnvelope,
    canonical: Vec<u8>,
    hash: [u8; 32],
}

impl Fragment {
    pub fn new(envelope: FragmentEnvelope) -> Result<Self, FragmentError> {
        let canonical = canonicalize(&envelope)?;
        let hash = Sha256::digest(&canonical).into();
        Ok(Fragment {
            inner: Arc::new(FragmentInner {
                envelope,
                canonical,
                hash,
            }),
        })
    }

    /// Decode JSON (canonical or not) and validate.
    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let env: FragmentEnvelope = serde_json::from_slice(bytes)?;
        Ok(Fragment::new(env)?)
    }

    pub fn envelope(&self) -> &FragmentEnvelope {
        &self.inner.envelope
    }

    pub fn canonical(&self) -> &[u8] {
        &self.inner.canonical
    }

    pub fn hash(&self) -> &[u8; 32] {
        &self.inner.hash
    }

    pub fn event_id(&self) -> &str {
        &self.inner.envelope.event_id
    }

    pub fn fragment_id(&self) -> &str {
        &self.inner.envelope.fragment_id
    }

    pub fn kind(&self) -> FragmentKind {
        self.inner.envelope.fragment_kind
    }

    pub fn sequence(&self) -> u64 {
        self.inner.envelope.sequence
    }

    /// Total order used wherever fragments must be processed deterministically.
    pub fn sort_key(&self) -> (FragmentKind, u64, &str) {
        (self.kind(), self.sequence(), self.fragment_id())
    }
}

impl PartialEq for Fragment {
    fn eq(&self, other: &Self) -> bool {
        self.inner.hash == other.inner.hash
    }
}

impl Eq for Fragment {}
