//! Builders for well-formed envelopes and seeded synthetic workloads.
//!
//! Used by unit tests, integration tests, the acceptance suite and the CLI's
//! fixture commands.

use std::collections::BTreeMap;

use chrono::TimeDelta;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::record::*;
use crate::time::Timestamp;

/// 2024-05-01T12:00:00Z.
pub fn t0() -> Timestamp {
    Timestamp::from_millis(1_714_564_800_000)
}

fn envelope(
    event_id: &str,
    fragment_id: &str,
    sequence: u64,
    kind: FragmentKind,
    payload: Payload,
) -> FragmentEnvelope {
    FragmentEnvelope {
        spec_version: SPEC_VERSION.to_owned(),
        event_id: event_id.to_owned(),
        fragment_id: fragment_id.to_owned(),
        fragment_kind: kind,
        sequence,
        emitted_at: t0().saturating_add(TimeDelta::seconds(sequence as i64)),
        payload,
    }
}

/// Knobs for the start payload; `Default` gives a fully populated start.
#[derive(Debug, Clone)]
pub struct StartSpec {
    pub model_id: String,
    pub invoked_at: Timestamp,
    pub run_id: Option<String>,
    pub parent_event_id: Option<String>,
    pub target: bool,
    pub inline_text: Option<String>,
    pub features: Option<BTreeMap<String, f64>>,
}

impl Default for StartSpec {
    fn default() -> Self {
        StartSpec {
            model_id: "sepsis-risk".into(),
            invoked_at: t0(),
            run_id: None,
            parent_event_id: None,
            target: true,
            inline_text: Some("vitals: hr=112 rr=24 temp=38.9".into()),
            features: None,
        }
    }
}

pub fn start_payload(spec: &StartSpec) -> StartPayload {
    let (mode, content, content_address) = match &spec.inline_text {
        Some(t) => (InputMode::Inline, Some(InlineContent::Text(t.clone())), None),
        None => (
            InputMode::Reference,
            None,
            Some(ContentAddress::of(b"input document")),
        ),
    };
    StartPayload {
        header: Header {
            server_id: "ehr-gw-01".into(),
            invoked_at: spec.invoked_at,
            input_retrieved_at: Some(spec.invoked_at.saturating_sub(TimeDelta::milliseconds(250))),
            run_id: spec.run_id.clone(),
            parent_event_id: spec.parent_event_id.clone(),
            spec_version: SPEC_VERSION.into(),
        },
        model: ModelInstance {
            model_id: spec.model_id.clone(),
            model_version: "2.3.1".into(),
            model_card_ref: Some("https://models.example.org/sepsis-risk/card".into()),
            data_sheet_ref: None,
            training_data_version: Some("2018-01..2019-01".into()),
            retrieval_sources: Vec::new(),
            test_time_edits: None,
        },
        user: UserIdentity {
            chain: vec![
                Principal {
                    kind: PrincipalKind::Service,
                    id: "triage-dashboard".into(),
                    id_system: "service-registry".into(),
                },
                Principal {
                    kind: PrincipalKind::Human,
                    id: "1234567893".into(),
                    id_system: "NPI".into(),
                },
            ],
        },
        target: spec.target.then(|| TargetIdentity {
            kind: TargetKind::Patient,
            id: "MRN-004211".into(),
            id_system: "MRN".into(),
        }),
        inputs: Inputs {
            mode,
            content,
            content_address,
            media_type: "text/plain".into(),
            features: spec.features.clone(),
        },
    }
}

pub fn start_env_with(event_id: &str, fragment_id: &str, spec: &StartSpec) -> FragmentEnvelope {
    let mut env = envelope(
        event_id,
        fragment_id,
        0,
        FragmentKind::Start,
        Payload::Start(start_payload(spec)),
    );
    env.emitted_at = spec.invoked_at;
    env
}

pub fn start_env(event_id: &str, fragment_id: &str) -> FragmentEnvelope {
    start_env_with(event_id, fragment_id, &StartSpec::default())
}

pub fn artifact_env(event_id: &str, fragment_id: &str, sequence: u64) -> FragmentEnvelope {
    envelope(
        event_id,
        fragment_id,
        sequence,
        FragmentKind::Artifact,
        Payload::Artifact(ArtifactPayload {
            artifact_kind: ArtifactKind::ReasoningTrace,
            body: Body::Inline(InlineContent::Text(format!("step {sequence}: considered lactate"))),
        }),
    )
}

pub fn output_payload(terminal: bool, failure: bool) -> OutputPayload {
    OutputPayload {
        modality: OutputModality::Prediction,
        body: Body::Inline(InlineContent::Text("risk=0.31".into())),
        confidence: Some(0.8),
        risk_score: Some(0.31),
        triage_flag: false,
        terminal,
        failure,
    }
}

pub fn output_env(
    event_id: &str,
    fragment_id: &str,
    sequence: u64,
    terminal: bool,
    failure: bool,
) -> FragmentEnvelope {
    envelope(
        event_id,
        fragment_id,
        sequence,
        FragmentKind::Output,
        Payload::Output(output_payload(terminal, failure)),
    )
}

pub fn outcome_env(event_id: &str, fragment_id: &str, sequence: u64) -> FragmentEnvelope {
    envelope(
        event_id,
        fragment_id,
        sequence,
        FragmentKind::Outcome,
        Payload::Outcome(OutcomePayload {
            action_taken: "antibiotics administered".into(),
            observed_result: Some("lactate normalized at 6h".into()),
            observed_at: t0().saturating_add(TimeDelta::hours(6)),
            linkage_basis: LinkageBasis::TemporalProximity,
            linkage_strength: 0.6,
        }),
    )
}

pub fn feedback_env(event_id: &str, fragment_id: &str, sequence: u64) -> FragmentEnvelope {
    envelope(
        event_id,
        fragment_id,
        sequence,
        FragmentKind::Feedback,
        Payload::Feedback(FeedbackPayload {
            rating: Some(4),
            free_text: Some("useful".into()),
            rater: None,
        }),
    )
}

/// All fragments of one event with a random shape: a start, 0–2 artifacts,
/// 1–2 outputs (the last terminal), 0–2 outcomes and 0–1 feedback, at most
/// `max_fragments` in total.
pub fn random_event<R: Rng>(rng: &mut R, event_id: &str, max_fragments: usize) -> Vec<FragmentEnvelope> {
    let spec = StartSpec {
        model_id: ["sepsis-risk", "readmit-30d", "note-summarizer"][rng.random_range(0..3)].into(),
        invoked_at: t0().saturating_add(TimeDelta::seconds(rng.random_range(0..86_400 * 30))),
        target: rng.random_bool(0.7),
        ..StartSpec::default()
    };
    let mut out = vec![start_env_with(event_id, &format!("{event_id}/start"), &spec)];
    let mut seq = 1;
    let push = |out: &mut Vec<FragmentEnvelope>, env: FragmentEnvelope| {
        if out.len() < max_fragments {
            out.push(env);
        }
    };
    for _ in 0..rng.random_range(0..=2) {
        push(&mut out, artifact_env(event_id, &format!("{event_id}/a{seq}"), seq));
        seq += 1;
    }
    let n_out = rng.random_range(1..=2);
    for i in 0..n_out {
        let terminal = i + 1 == n_out;
        let failure = terminal && rng.random_bool(0.1);
        push(
            &mut out,
            output_env(event_id, &format!("{event_id}/o{seq}"), seq, terminal, failure),
        );
        seq += 1;
    }
    for _ in 0..rng.random_range(0..=2) {
        push(&mut out, outcome_env(event_id, &format!("{event_id}/oc{seq}"), seq));
        seq += 1;
    }
    if rng.random_bool(0.5) {
        push(&mut out, feedback_env(event_id, &format!("{event_id}/fb{seq}"), seq));
    }
    for env in out.iter_mut().skip(1) {
        env.emitted_at = spec.invoked_at.saturating_add(TimeDelta::seconds(env.sequence as i64));
    }
    out
}

/// A seeded multi-event workload in per-event emission order.
pub fn workload(seed: u64, events: usize) -> Vec<FragmentEnvelope> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..events)
        .flat_map(|i| random_event(&mut rng, &format!("evt-{i:05}"), 8))
        .collect()
}

/// Shuffle with a seeded RNG.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

pub fn fragments(envs: &[FragmentEnvelope]) -> Vec<Fragment> {
    envs.iter()
        .map(|e| Fragment::new(e.clone()).expect("testkit envelopes are valid"))
        .collect()
}
