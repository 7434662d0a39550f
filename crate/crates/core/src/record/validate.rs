use std::fmt;

use serde::{Deserialize, Serialize};

use super::*;

/// One broken rule, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Violations(pub Vec<Violation>);

impl Violations {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Violation> {
        self.0.iter()
    }

    pub fn messages(&self) -> Vec<String> {
        self.0.iter().map(ToString::to_string).collect()
    }

    fn push(&mut self, field: impl Into<String>, rule: impl Into<String>) {
        self.0.push(Violation {
            field: field.into(),
            rule: rule.into(),
        });
    }
}

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Violations {}

/// Check every envelope and payload invariant. Pure; an empty result means
/// the fragment is valid.
pub fn validate_fragment(env: &FragmentEnvelope) -> Result<(), Violations> {
    let mut v = Violations::default();
    check_envelope(env, &mut v);
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

fn check_envelope(env: &FragmentEnvelope, v: &mut Violations) {
    if env.spec_version != SPEC_VERSION {
        v.push(
            "spec_version",
            format!("unrecognized spec_version {:?}, expected {SPEC_VERSION:?}", env.spec_version),
        );
    }
    check_opaque_id("event_id", &env.event_id, v);
    let n = env.fragment_id.chars().count();
    if n == 0 || n > MAX_ID_LEN {
        v.push("fragment_id", format!("length {n} outside 1..={MAX_ID_LEN}"));
    }
    if env.payload.kind() != env.fragment_kind {
        v.push(
            "payload",
            format!(
                "payload/kind mismatch: fragment_kind is {} but payload is {}",
                env.fragment_kind,
                env.payload.kind()
            ),
        );
    }
    match &env.payload {
        Payload::Start(p) => check_start(env, p, v),
        Payload::Artifact(p) => check_body("payload.body", &p.body, v),
        Payload::Output(p) => check_output(p, v),
        Payload::Outcome(p) => check_outcome(p, v),
        Payload::Feedback(p) => check_feedback(p, v),
    }
}

/// 1–128 printable ASCII characters, no whitespace.
fn check_opaque_id(field: &str, id: &str, v: &mut Violations) {
    let n = id.chars().count();
    if n == 0 || n > MAX_ID_LEN {
        v.push(field, format!("length {n} outside 1..={MAX_ID_LEN}"));
    }
    if !id.bytes().all(|b| (0x21..=0x7e).contains(&b)) {
        v.push(field, "must be printable ASCII without whitespace");
    }
}

fn non_empty(field: &str, s: &str, v: &mut Violations) {
    if s.trim().is_empty() {
        v.push(field, "must be non-empty");
    }
}

fn check_uri(field: &str, s: &str, v: &mut Violations) {
    let ok = s.split_once(':').is_some_and(|(scheme, rest)| {
        !rest.is_empty()
            && scheme.starts_with(|c: char| c.is_ascii_alphabetic())
            && scheme
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'))
    }) && !s.chars().any(char::is_whitespace);
    if !ok {
        v.push(field, "must be an absolute URI");
    }
}

fn check_unit_interval(field: &str, name: &str, x: f64, v: &mut Violations) {
    if !(0.0..=1.0).contains(&x) {
        v.push(field, format!("{name} out of [0,1]"));
    }
}

fn check_address(field: &str, a: &ContentAddress, v: &mut Violations) {
    if a.algorithm != CONTENT_ALGORITHM {
        v.push(
            format!("{field}.algorithm"),
            format!("unsupported algorithm {:?}, expected {CONTENT_ALGORITHM:?}", a.algorithm),
        );
    }
    let hex_ok = a.digest.len() == 64
        && a.digest
            .bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
    if !hex_ok {
        v.push(format!("{field}.digest"), "must be 64 lowercase hex characters");
    }
}

fn check_inline(field: &str, c: &InlineContent, v: &mut Violations) {
    if let InlineContent::Map(m) = c {
        for (k, val) in m {
            if k.is_empty() {
                v.push(field, "map keys must be non-empty");
            }
            if let Some(n) = val.as_number() {
                if n.as_f64().is_some_and(|f| !f.is_finite()) {
                    v.push(format!("{field}.{k}"), "numbers must be finite");
                }
            }
        }
    }
}

fn check_body(field: &str, b: &Body, v: &mut Violations) {
    match b {
        Body::Inline(c) => check_inline(field, c, v),
        Body::Reference(a) => check_address(field, a, v),
    }
}

fn check_start(env: &FragmentEnvelope, p: &StartPayload, v: &mut Violations) {
    let h = &p.header;
    non_empty("payload.header.server_id", &h.server_id, v);
    if h.spec_version != env.spec_version {
        v.push(
            "payload.header.spec_version",
            "must equal the envelope spec_version",
        );
    }
    if let Some(run) = &h.run_id {
        check_opaque_id("payload.header.run_id", run, v);
    }
    if let Some(parent) = &h.parent_event_id {
        check_opaque_id("payload.header.parent_event_id", parent, v);
        if *parent == env.event_id {
            v.push(
                "payload.header.parent_event_id",
                "must not equal the record's own event_id",
            );
        }
    }

    let m = &p.model;
    non_empty("payload.model.model_id", &m.model_id, v);
    non_empty("payload.model.model_version", &m.model_version, v);
    if let Some(u) = &m.model_card_ref {
        check_uri("payload.model.model_card_ref", u, v);
    }
    if let Some(u) = &m.data_sheet_ref {
        check_uri("payload.model.data_sheet_ref", u, v);
    }
    for (i, u) in m.retrieval_sources.iter().enumerate() {
        check_uri(&format!("payload.model.retrieval_sources[{i}]"), u, v);
    }

    if p.user.chain.is_empty() {
        v.push("payload.user.chain", "must contain at least one principal");
    }
    for (i, pr) in p.user.chain.iter().enumerate() {
        non_empty(&format!("payload.user.chain[{i}].id"), &pr.id, v);
        non_empty(&format!("payload.user.chain[{i}].id_system"), &pr.id_system, v);
    }

    if let Some(t) = &p.target {
        non_empty("payload.target.id", &t.id, v);
    }

    let inp = &p.inputs;
    non_empty("payload.inputs.media_type", &inp.media_type, v);
    match (inp.mode, &inp.content, &inp.content_address) {
        (InputMode::Inline, Some(c), None) => check_inline("payload.inputs.content", c, v),
        (InputMode::Reference, None, Some(a)) => {
            check_address("payload.inputs.content_address", a, v)
        }
        _ => v.push(
            "payload.inputs",
            "exactly one of content / content_address must be populated, consistent with mode",
        ),
    }
    if let Some(features) = &inp.features {
        for (name, x) in features {
            if name.is_empty() {
                v.push("payload.inputs.features", "feature names must be non-empty");
            }
            if !x.is_finite() {
                v.push(format!("payload.inputs.features.{name}"), "must be finite");
            }
        }
    }
}

fn check_output(p: &OutputPayload, v: &mut Violations) {
    check_body("payload.body", &p.body, v);
    if let Some(c) = p.confidence {
        check_unit_interval("payload.confidence", "confidence", c, v);
    }
    if let Some(r) = p.risk_score {
        if !r.is_finite() {
            v.push("payload.risk_score", "must be finite");
        }
    }
}

fn check_outcome(p: &OutcomePayload, v: &mut Violations) {
    non_empty("payload.action_taken", &p.action_taken, v);
    check_unit_interval(
        "payload.linkage_strength",
        "linkage_strength",
        p.linkage_strength,
        v,
    );
}

fn check_feedback(p: &FeedbackPayload, v: &mut Violations) {
    if let Some(r) = p.rating {
        if !(1..=5).contains(&r) {
            v.push("payload.rating", "rating out of 1..=5");
        }
    }
    let has_text = p.free_text.as_deref().is_some_and(|t| !t.trim().is_empty());
    if p.rating.is_none() && !has_text {
        v.push("payload", "at least one of rating / free_text must be present");
    }
    if let Some(r) = &p.rater {
        non_empty("payload.rater.id", &r.id, v);
    }
}
