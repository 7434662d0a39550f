//! Capture policy: which invocations get full tracing, which are sampled,
//! and when a risk flag upgrades a sampled event back to full capture.

use std::collections::{HashMap, HashSet};

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::record::{Fragment, OutputPayload, StartPayload};
use crate::time::Timestamp;

pub const DEFAULT_UPGRADE_WINDOW: TimeDelta = TimeDelta::seconds(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pilot,
    PostUpdate,
    SteadyState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureMode {
    Full,
    Sampled,
    SummaryOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRule {
    pub id: String,
    /// Glob over model_id; `*` matches any run of characters.
    pub model_pattern: String,
    pub phase: Phase,
    pub mode: CaptureMode,
    #[serde(default = "one")]
    pub sample_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_threshold: Option<f64>,
    #[serde(default)]
    pub flag_upgrades: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapturePolicy {
    pub rules: Vec<PolicyRule>,
}

impl Default for CapturePolicy {
    /// Capture everything.
    fn default() -> Self {
        CapturePolicy {
            rules: vec![PolicyRule {
                id: "default".into(),
                model_pattern: "*".into(),
                phase: Phase::Pilot,
                mode: CaptureMode::Full,
                sample_rate: 1.0,
                risk_threshold: None,
                flag_upgrades: false,
            }],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy has no rules")]
    Empty,
    #[error("policy needs a catch-all rule with model_pattern \"*\" as its last rule")]
    NoCatchAll,
    #[error("rule {0:?}: sample_rate must be in [0,1]")]
    SampleRate(String),
    #[error("rule {0:?}: risk_threshold must be finite")]
    RiskThreshold(String),
    #[error("rule {0:?}: empty id or model_pattern")]
    EmptyField(String),
    #[error("duplicate rule id {0:?}")]
    DuplicateId(String),
    #[error("no rule matches model_id {0:?}")]
    NoMatch(String),
    #[error("malformed policy document: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Match `text` against a pattern where `*` stands for any substring.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

impl CapturePolicy {
    pub fn from_json(bytes: &[u8]) -> Result<Self, PolicyError> {
        let p: CapturePolicy = serde_json::from_slice(bytes)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let last = self.rules.last().ok_or(PolicyError::Empty)?;
        let mut ids = HashSet::new();
        for (i, r) in self.rules.iter().enumerate() {
            if r.id.is_empty() || r.model_pattern.is_empty() {
                return Err(PolicyError::EmptyField(r.id.clone()));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(PolicyError::DuplicateId(r.id.clone()));
            }
            if !(0.0..=1.0).contains(&r.sample_rate) {
                return Err(PolicyError::SampleRate(r.id.clone()));
            }
            if r.risk_threshold.is_some_and(|t| !t.is_finite()) {
                return Err(PolicyError::RiskThreshold(r.id.clone()));
            }
            if r.model_pattern == "*" && i + 1 != self.rules.len() {
                return Err(PolicyError::NoCatchAll);
            }
        }
        if last.model_pattern != "*" {
            return Err(PolicyError::NoCatchAll);
        }
        Ok(())
    }

    /// First rule whose pattern matches.
    pub fn rule_for(&self, model_id: &str) -> Result<&PolicyRule, PolicyError> {
        self.rules
            .iter()
            .find(|r| glob_match(&r.model_pattern, model_id))
            .ok_or_else(|| PolicyError::NoMatch(model_id.to_owned()))
    }

    pub fn rule(&self, id: &str) -> Option<&PolicyRule> {
        self.rules.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capture {
    DropArtifacts,
    CaptureSummary,
    CaptureFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureDecision {
    pub decision: Capture,
    pub decided_by: String,
    pub deterministic_draw: f64,
}

/// The first 8 bytes of sha-256(event_id) as a big-endian integer over
/// 2^64, truncated to 53 bits so the result is always below 1.
pub fn deterministic_draw(event_id: &str) -> f64 {
    let h = Sha256::digest(event_id.as_bytes());
    let n = u64::from_be_bytes(h[..8].try_into().expect("8 bytes"));
    (n >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn decide(rule: &PolicyRule, event_id: &str) -> CaptureDecision {
    let draw = deterministic_draw(event_id);
    let decision = match (rule.phase, rule.mode) {
        (Phase::Pilot | Phase::PostUpdate, _) => Capture::CaptureFull,
        (Phase::SteadyState, CaptureMode::Full) => Capture::CaptureFull,
        (Phase::SteadyState, CaptureMode::SummaryOnly) => Capture::CaptureSummary,
        (Phase::SteadyState, CaptureMode::Sampled) if draw < rule.sample_rate => Capture::CaptureFull,
        (Phase::SteadyState, CaptureMode::Sampled) => Capture::DropArtifacts,
    };
    CaptureDecision {
        decision,
        decided_by: rule.id.clone(),
        deterministic_draw: draw,
    }
}

/// Decision for an invocation; a pure function of event_id and the rule
/// matching the start's model_id.
pub fn capture_decision(
    start: &StartPayload,
    event_id: &str,
    policy: &CapturePolicy,
) -> Result<CaptureDecision, PolicyError> {
    Ok(decide(policy.rule_for(&start.model.model_id)?, event_id))
}

/// Whether an output carries a flag that should trigger full capture.
pub fn flags_upgrade(output: &OutputPayload, rule: &PolicyRule) -> bool {
    rule.flag_upgrades
        && (output.triage_flag
            || matches!((output.risk_score, rule.risk_threshold), (Some(s), Some(t)) if s >= t))
}

/// Upgrade to full capture on a triage flag or a risk score at or above the
/// rule's threshold. Never downgrades.
pub fn upgrade_on_flag(decision: &CaptureDecision, output: &OutputPayload, rule: &PolicyRule) -> CaptureDecision {
    let mut d = decision.clone();
    if flags_upgrade(output, rule) {
        d.decision = Capture::CaptureFull;
    }
    d
}

/// Artifacts of non-full events, held briefly in case a flagged output
/// upgrades the event.
#[derive(Debug)]
pub struct UpgradeBuffer {
    window: TimeDelta,
    held: HashMap<String, Vec<(Fragment, Timestamp)>>,
}

impl UpgradeBuffer {
    pub fn new(window: TimeDelta) -> Self {
        UpgradeBuffer {
            window,
            held: HashMap::new(),
        }
    }

    pub fn window(&self) -> TimeDelta {
        self.window
    }

    /// Hold an artifact received at `now`. Re-sends are ignored.
    pub fn hold(&mut self, fragment: Fragment, now: Timestamp) {
        let slot = self.held.entry(fragment.event_id().to_owned()).or_default();
        if !slot.iter().any(|(f, _)| f.fragment_id() == fragment.fragment_id()) {
            slot.push((fragment, now));
        }
    }

    /// Artifacts of `event_id` still inside the window, removing them.
    pub fn release(&mut self, event_id: &str, now: Timestamp) -> Vec<Fragment> {
        let window = self.window;
        self.held
            .remove(event_id)
            .unwrap_or_default()
            .into_iter()
            .filter(|(_, at)| at.until(now) <= window)
            .map(|(f, _)| f)
            .collect()
    }

    /// Discard artifacts whose window has passed; returns how many.
    pub fn expire(&mut self, now: Timestamp) -> usize {
        let window = self.window;
        let mut dropped = 0;
        self.held.retain(|_, v| {
            let before = v.len();
            v.retain(|(_, at)| at.until(now) <= window);
            dropped += before - v.len();
            !v.is_empty()
        });
        dropped
    }

    pub fn depth(&self) -> usize {
        self.held.values().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::*;

    fn rule(phase: Phase, mode: CaptureMode, rate: f64) -> PolicyRule {
        PolicyRule {
            id: "r".into(),
            model_pattern: "*".into(),
            phase,
            mode,
            sample_rate: rate,
            risk_threshold: Some(0.9),
            flag_upgrades: true,
        }
    }

    #[test]
    fn draw_of_evt_0001_is_pinned() {
        // python3: int.from_bytes(hashlib.sha256(b"evt-0001").digest()[:8], "big") / 2**64
        let d = deterministic_draw("evt-0001");
        assert!((d - 0.4448105463144476).abs() < 1e-15, "{d}");
        let r = rule(Phase::SteadyState, CaptureMode::Sampled, 0.5);
        assert_eq!(decide(&r, "evt-0001").decision, Capture::CaptureFull);
        // 0.14886... for evt-0003
        let r = rule(Phase::SteadyState, CaptureMode::Sampled, 0.1);
        assert_eq!(decide(&r, "evt-0003").decision, Capture::DropArtifacts);
    }

    #[test]
    fn rate_boundaries() {
        let all = rule(Phase::SteadyState, CaptureMode::Sampled, 1.0);
        let none = rule(Phase::SteadyState, CaptureMode::Sampled, 0.0);
        for i in 0..500 {
            let id = format!("evt-{i}");
            assert_eq!(decide(&all, &id).decision, Capture::CaptureFull);
            assert_eq!(decide(&none, &id).decision, Capture::DropArtifacts);
        }
    }

    #[test]
    fn pilot_and_post_update_capture_everything() {
        for phase in [Phase::Pilot, Phase::PostUpdate] {
            for mode in [CaptureMode::Sampled, CaptureMode::SummaryOnly] {
                assert_eq!(decide(&rule(phase, mode, 0.0), "e").decision, Capture::CaptureFull);
            }
        }
        assert_eq!(
            decide(&rule(Phase::SteadyState, CaptureMode::SummaryOnly, 1.0), "e").decision,
            Capture::CaptureSummary
        );
    }

    #[test]
    fn flagged_output_upgrades_and_unflagged_does_not() {
        let r = rule(Phase::SteadyState, CaptureMode::Sampled, 0.0);
        let d = decide(&r, "e");
        let mut out = output_payload(true, false);
        out.risk_score = None;
        assert_eq!(upgrade_on_flag(&d, &out, &r), d);
        out.triage_flag = true;
        assert_eq!(upgrade_on_flag(&d, &out, &r).decision, Capture::CaptureFull);
    }

    #[test]
    fn risk_threshold_is_inclusive() {
        let r = rule(Phase::SteadyState, CaptureMode::Sampled, 0.0);
        let d = decide(&r, "e");
        let mut out = output_payload(true, false);
        for (score, upgraded) in [(0.92, true), (0.90, true), (0.89, false)] {
            out.risk_score = Some(score);
            let got = upgrade_on_flag(&d, &out, &r).decision == Capture::CaptureFull;
            assert_eq!(got, upgraded, "score {score}");
        }
    }

    #[test]
    fn upgrade_requires_flag_upgrades() {
        let mut r = rule(Phase::SteadyState, CaptureMode::Sampled, 0.0);
        r.flag_upgrades = false;
        let d = decide(&r, "e");
        let mut out = output_payload(true, false);
        out.triage_flag = true;
        assert_eq!(upgrade_on_flag(&d, &out, &r), d);
    }

    #[test]
    fn first_match_wins() {
        let p = CapturePolicy::from_json(
            br#"{"rules":[
                {"id":"llm","model_pattern":"note-*","phase":"steady_state","mode":"sampled","sample_rate":0.1},
                {"id":"all","model_pattern":"*","phase":"pilot","mode":"full"}]}"#,
        )
        .unwrap();
        assert_eq!(p.rule_for("note-summarizer").unwrap().id, "llm");
        assert_eq!(p.rule_for("sepsis-risk").unwrap().id, "all");
        let start = start_payload(&StartSpec::default());
        assert_eq!(capture_decision(&start, "e", &p).unwrap().decided_by, "all");
    }

    #[test]
    fn malformed_policies_are_rejected() {
        let no_catch_all = br#"{"rules":[{"id":"a","model_pattern":"m*","phase":"pilot","mode":"full"}]}"#;
        assert!(matches!(CapturePolicy::from_json(no_catch_all), Err(PolicyError::NoCatchAll)));
        let bad_rate = br#"{"rules":[{"id":"a","model_pattern":"*","phase":"pilot","mode":"sampled","sample_rate":1.5}]}"#;
        assert!(matches!(CapturePolicy::from_json(bad_rate), Err(PolicyError::SampleRate(_))));
        assert!(matches!(CapturePolicy::from_json(br#"{"rules":[]}"#), Err(PolicyError::Empty)));
        assert!(matches!(CapturePolicy::from_json(b"{"), Err(PolicyError::Parse(_))));
        let shadowed = br#"{"rules":[
            {"id":"a","model_pattern":"*","phase":"pilot","mode":"full"},
            {"id":"b","model_pattern":"m","phase":"pilot","mode":"full"}]}"#;
        assert!(matches!(CapturePolicy::from_json(shadowed), Err(PolicyError::NoCatchAll)));
    }

    #[test]
    fn glob_cases() {
        assert!(glob_match("*", ""));
        assert!(glob_match("sepsis-*", "sepsis-risk"));
        assert!(glob_match("*-risk", "sepsis-risk"));
        assert!(glob_match("s*s*k", "sepsis-risk"));
        assert!(!glob_match("a*a", "a"));
        assert!(!glob_match("sepsis", "sepsis-risk"));
    }

    #[test]
    fn buffer_releases_within_window_only() {
        let mut b = UpgradeBuffer::new(DEFAULT_UPGRADE_WINDOW);
        let f = |id: &str| Fragment::new(artifact_env("e", id, 1)).unwrap();
        b.hold(f("a1"), t0());
        b.hold(f("a1"), t0());
        b.hold(f("a2"), t0().saturating_add(TimeDelta::seconds(30)));
        assert_eq!(b.depth(), 2);
        let got = b.release("e", t0().saturating_add(TimeDelta::seconds(61)));
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].fragment_id(), "a2");
        assert_eq!(b.depth(), 0);

        b.hold(f("a3"), t0());
        assert_eq!(b.expire(t0().saturating_add(TimeDelta::seconds(60))), 0);
        assert_eq!(b.expire(t0().saturating_add(TimeDelta::seconds(61))), 1);
    }
}
