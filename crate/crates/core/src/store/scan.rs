use serde::{Deserialize, Serialize};

use super::{RecordView, Store, StoreError};
use crate::record::{ConformanceProfile, RecordStatus};
use crate::time::Timestamp;

pub const DEFAULT_PAGE_SIZE: usize = 100;
pub const MAX_PAGE_SIZE: usize = 1000;

/// Conjunctive record filter. `from` is inclusive and `to` exclusive, both
/// against `header.invoked_at`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScanFilter {
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
    pub model_id: Option<String>,
    pub run_id: Option<String>,
    pub conformance: Option<ConformanceProfile>,
    pub status: Option<RecordStatus>,
    pub page_size: Option<usize>,
    pub page_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FilterError {
    #[error("unknown filter predicates: {}", .0.join(", "))]
    UnknownPredicates(Vec<String>),
    #[error("bad value {value:?} for {name}: {reason}")]
    BadValue {
        name: String,
        value: String,
        reason: String,
    },
    #[error("malformed page token")]
    BadToken,
}

pub const PREDICATES: [&str; 8] = [
    "from",
    "to",
    "model_id",
    "run_id",
    "conformance",
    "status",
    "page_size",
    "page_token",
];

impl ScanFilter {
    /// Parse query-string pairs. Every unknown name is reported at once.
    pub fn from_pairs<I, K, V>(pairs: I) -> Result<Self, FilterError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut f = ScanFilter::default();
        let mut unknown = Vec::new();
        for (k, v) in pairs {
            let (k, v) = (k.as_ref(), v.as_ref());
            let bad = |reason: &str| FilterError::BadValue {
                name: k.to_owned(),
                value: v.to_owned(),
                reason: reason.to_owned(),
            };
            match k {
                "from" => f.from = Some(Timestamp::parse(v).map_err(|e| bad(&e.to_string()))?),
                "to" => f.to = Some(Timestamp::parse(v).map_err(|e| bad(&e.to_string()))?),
                "model_id" => f.model_id = Some(v.to_owned()),
                "run_id" => f.run_id = Some(v.to_owned()),
                "conformance" => {
                    f.conformance =
                        Some(ConformanceProfile::parse(v).ok_or_else(|| bad("unknown profile"))?)
                }
                "status" => f.status = Some(RecordStatus::parse(v).ok_or_else(|| bad("unknown status"))?),
                "page_size" => {
                    let n: usize = v.parse().map_err(|_| bad("not a positive integer"))?;
                    if n == 0 || n > MAX_PAGE_SIZE {
                        return Err(bad(&format!("must be in 1..={MAX_PAGE_SIZE}")));
                    }
                    f.page_size = Some(n);
                }
                "page_token" => {
                    decode_token(v)?;
                    f.page_token = Some(v.to_owned());
                }
                other => unknown.push(other.to_owned()),
            }
        }
        if unknown.is_empty() {
            Ok(f)
        } else {
            unknown.sort();
            unknown.dedup();
            Err(FilterError::UnknownPredicates(unknown))
        }
    }

    /// Query-string pairs that `from_pairs` parses back to `self`.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if let Some(t) = self.from {
            out.push(("from", t.to_string()));
        }
        if let Some(t) = self.to {
            out.push(("to", t.to_string()));
        }
        if let Some(m) = &self.model_id {
            out.push(("model_id", m.clone()));
        }
        if let Some(r) = &self.run_id {
            out.push(("run_id", r.clone()));
        }
        if let Some(c) = self.conformance {
            out.push(("conformance", c.as_str().to_owned()));
        }
        if let Some(s) = self.status {
            out.push(("status", s.as_str().to_owned()));
        }
        if let Some(n) = self.page_size {
            out.push(("page_size", n.to_string()));
        }
        if let Some(t) = &self.page_token {
            out.push(("page_token", t.clone()));
        }
        out
    }

    pub fn matches(&self, v: &RecordView) -> bool {
        let h = v.header();
        self.from.is_none_or(|t| h.invoked_at >= t)
            && self.to.is_none_or(|t| h.invoked_at < t)
            && self.model_id.as_deref().is_none_or(|m| v.model_id() == m)
            && self.run_id.as_deref().is_none_or(|r| h.run_id.as_deref() == Some(r))
            && self.conformance.is_none_or(|c| v.conformance() == c)
            && self.status.is_none_or(|s| v.status() == s)
    }
}

fn encode_token(at: Timestamp, event_id: &str) -> String {
    hex::encode(format!("{}|{}", at.as_millis(), event_id))
}

fn decode_token(token: &str) -> Result<(i64, String), FilterError> {
    let raw = hex::decode(token).map_err(|_| FilterError::BadToken)?;
    let s = String::from_utf8(raw).map_err(|_| FilterError::BadToken)?;
    let (ms, id) = s.split_once('|').ok_or(FilterError::BadToken)?;
    Ok((ms.parse().map_err(|_| FilterError::BadToken)?, id.to_owned()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub records: Vec<RecordView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_page_token: Option<String>,
}

impl Store {
    /// Records matching every predicate, ordered by `header.invoked_at`
    /// then `event_id`. Events that only have orphan fragments are not
    /// records and never appear.
    pub fn scan(&self, filter: &ScanFilter) -> Result<Page, StoreError> {
        let after = filter.page_token.as_deref().map(decode_token).transpose()?;
        let page_size = filter.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
        let mut hits: Vec<RecordView> = {
            let idx = self.index.read();
            let mut ids: Vec<&String> = idx.events.keys().chain(idx.summaries.keys()).collect();
            ids.sort();
            ids.dedup();
            ids.into_iter()
                .filter_map(|id| idx.view(id))
                .filter(|v| filter.matches(v))
                .collect()
        };
        let key = |v: &RecordView| (v.header().invoked_at.as_millis(), v.event_id().to_owned());
        hits.sort_by_key(key);
        if let Some(after) = after {
            hits.retain(|v| key(v) > after);
        }
        let next_page_token = (hits.len() > page_size).then(|| {
            let last = &hits[page_size - 1];
            encode_token(last.header().invoked_at, last.event_id())
        });
        hits.truncate(page_size);
        Ok(Page {
            records: hits,
            next_page_token,
        })
    }

    /// Follow continuation tokens until exhausted.
    pub fn scan_all(&self, filter: &ScanFilter) -> Result<Vec<RecordView>, StoreError> {
        let mut f = filter.clone();
        let mut out = Vec::new();
        loop {
            let page = self.scan(&f)?;
            out.extend(page.records);
            match page.next_page_token {
                Some(t) => f.page_token = Some(t),
                None => return Ok(out),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_predicates_are_all_listed() {
        let err = ScanFilter::from_pairs([("model_id", "m1"), ("colour", "red"), ("age", "3")]).unwrap_err();
        assert_eq!(err, FilterError::UnknownPredicates(vec!["age".into(), "colour".into()]));
        assert_eq!(err.to_string(), "unknown filter predicates: age, colour");
    }

    #[test]
    fn pairs_round_trip() {
        let f = ScanFilter {
            from: Some(Timestamp::from_millis(0)),
            to: Some(Timestamp::from_millis(1000)),
            model_id: Some("m1".into()),
            run_id: Some("r".into()),
            conformance: Some(ConformanceProfile::Standard),
            status: Some(RecordStatus::Open),
            page_size: Some(3),
            page_token: Some(encode_token(Timestamp::from_millis(5), "e|1")),
        };
        assert_eq!(ScanFilter::from_pairs(f.to_pairs()).unwrap(), f);
    }

    #[test]
    fn token_survives_pipes_in_event_ids() {
        let t = encode_token(Timestamp::from_millis(42), "a|b");
        assert_eq!(decode_token(&t).unwrap(), (42, "a|b".to_owned()));
        assert_eq!(decode_token("zz"), Err(FilterError::BadToken));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(matches!(
            ScanFilter::from_pairs([("status", "pending")]),
            Err(FilterError::BadValue { .. })
        ));
        assert!(matches!(
            ScanFilter::from_pairs([("page_size", "0")]),
            Err(FilterError::BadValue { .. })
        ));
    }
}
