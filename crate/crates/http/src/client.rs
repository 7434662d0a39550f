use std::time::Duration;

use medlog::collector::{Health, IngestResponse, IngestStatus, RunView};
use medlog::spool::{Transport, TransportError};
use medlog::store::{Page, RecordView, ScanFilter};
use medlog::{ContentAddress, FragmentKind};
use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use serde::de::DeserializeOwned;
use ureq::Agent;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The request never reached the collector.
    #[error("collector unreachable at {url}: {reason}")]
    Unreachable { url: String, reason: String },
    /// The request may have reached the collector but no answer came back.
    #[error("no response from {url}: {reason}")]
    NoResponse { url: String, reason: String },
    #[error("HTTP {status} from {url}: {message}")]
    Status { url: String, status: u16, message: String },
    #[error("unexpected response from {url}: {reason}")]
    Decode { url: String, reason: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

/// Blocking client for one collector.
#[derive(Clone)]
pub struct Client {
    base: String,
    agent: Agent,
}

fn seg(s: &str) -> String {
    utf8_percent_encode(s, NON_ALPHANUMERIC).to_string()
}

impl Client {
    pub fn new(base: &str, timeout: Duration) -> Self {
        let config = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(timeout))
            .timeout_global(Some(timeout))
            .build();
        Client {
            base: base.trim_end_matches('/').to_owned(),
            agent: Agent::new_with_config(config),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn classify(&self, url: &str, e: ureq::Error) -> ClientError {
        use ureq::Error as E;
        use ureq::Timeout as T;
        let reason = e.to_string();
        let unreachable = match &e {
            E::ConnectionFailed | E::HostNotFound | E::BadUri(_) => true,
            E::Timeout(t) => matches!(t, T::Resolve | T::Connect),
            E::Io(io) => matches!(
                io.kind(),
                std::io::ErrorKind::ConnectionRefused | std::io::ErrorKind::AddrNotAvailable
            ),
            _ => false,
        };
        if unreachable {
            ClientError::Unreachable { url: url.to_owned(), reason }
        } else {
            ClientError::NoResponse { url: url.to_owned(), reason }
        }
    }

    fn finish(&self, url: &str, r: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<(u16, Vec<u8>), ClientError> {
        let mut resp = r.map_err(|e| self.classify(url, e))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| self.classify(url, e))?;
        Ok((status, body))
    }

    fn decode<T: DeserializeOwned>(&self, url: &str, body: &[u8]) -> Result<T, ClientError> {
        serde_json::from_slice(body).map_err(|e| ClientError::Decode {
            url: url.to_owned(),
            reason: e.to_string(),
        })
    }

    fn failure(&self, url: &str, status: u16, body: &[u8]) -> ClientError {
        let message = serde_json::from_slice::<serde_json::Value>(body)
            .ok()
            .and_then(|v| v.get("error").and_then(|m| m.as_str()).map(str::to_owned))
            .unwrap_or_else(|| String::from_utf8_lossy(body).into_owned());
        ClientError::Status {
            url: url.to_owned(),
            status,
            message,
        }
    }

    fn get_json<T: DeserializeOwned>(&self, url: &str) -> Result<T, ClientError> {
        let (status, body) = self.finish(url, self.agent.get(url).call())?;
        if status != 200 {
            return Err(self.failure(url, status, &body));
        }
        self.decode(url, &body)
    }

    /// Post one fragment. Any response carrying an ingest outcome is `Ok`,
    /// including conflict and invalid.
    pub fn ingest(&self, kind: &str, body: &[u8]) -> Result<IngestResponse, ClientError> {
        let url = format!("{}/v1/fragments/{}", self.base, seg(kind));
        let r = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body);
        let (status, body) = self.finish(&url, r)?;
        match status {
            200 | 202 | 400 | 409 => {
                if let Ok(resp) = serde_json::from_slice::<IngestResponse>(&body) {
                    return Ok(resp);
                }
                Err(self.failure(&url, status, &body))
            }
            _ => Err(self.failure(&url, status, &body)),
        }
    }

    pub fn record(&self, event_id: &str) -> Result<RecordView, ClientError> {
        self.get_json(&format!("{}/v1/records/{}", self.base, seg(event_id)))
    }

    pub fn run(&self, run_id: &str) -> Result<RunView, ClientError> {
        self.get_json(&format!("{}/v1/runs/{}", self.base, seg(run_id)))
    }

    pub fn query(&self, filter: &ScanFilter) -> Result<Page, ClientError> {
        let qs: Vec<String> = filter
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={}", seg(&v)))
            .collect();
        let mut url = format!("{}/v1/records", self.base);
        if !qs.is_empty() {
            url.push('?');
            url.push_str(&qs.join("&"));
        }
        self.get_json(&url)
    }

    /// Follow page tokens to the end.
    pub fn query_all(&self, filter: &ScanFilter) -> Result<Vec<RecordView>, ClientError> {
        let mut f = filter.clone();
        let mut out = Vec::new();
        loop {
            let page = self.query(&f)?;
            out.extend(page.records);
            match page.next_page_token {
                Some(t) => f.page_token = Some(t),
                None => return Ok(out),
            }
        }
    }

    /// Health report. An unhealthy collector answers 503 with the same body.
    pub fn health(&self) -> Result<Health, ClientError> {
        let url = format!("{}/v1/healthz", self.base);
        let (status, body) = self.finish(&url, self.agent.get(&url).call())?;
        match status {
            200 | 503 => self.decode(&url, &body),
            _ => Err(self.failure(&url, status, &body)),
        }
    }

    pub fn reload_policy(&self, document: &[u8]) -> Result<usize, ClientError> {
        let url = format!("{}/v1/admin/policy:reload", self.base);
        let r = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(document);
        let (status, body) = self.finish(&url, r)?;
        if status != 200 {
            return Err(self.failure(&url, status, &body));
        }
        let v: serde_json::Value = self.decode(&url, &body)?;
        Ok(v["rules"].as_u64().unwrap_or(0) as usize)
    }

    pub fn put_blob(&self, bytes: &[u8]) -> Result<ContentAddress, ClientError> {
        let url = format!("{}/v1/blobs", self.base);
        let r = self
            .agent
            .post(&url)
            .header("content-type", "application/octet-stream")
            .send(bytes);
        let (status, body) = self.finish(&url, r)?;
        if status != 201 {
            return Err(self.failure(&url, status, &body));
        }
        self.decode(&url, &body)
    }

    pub fn get_blob(&self, digest: &str) -> Result<Vec<u8>, ClientError> {
        let url = format!("{}/v1/blobs/{}", self.base, seg(digest));
        let (status, body) = self.finish(&url, self.agent.get(&url).call())?;
        if status != 200 {
            return Err(self.failure(&url, status, &body));
        }
        Ok(body)
    }
}

impl Transport for Client {
    fn deliver(&self, kind: FragmentKind, body: &[u8]) -> Result<IngestStatus, TransportError> {
        match self.ingest(kind.as_str(), body) {
            Ok(r) => Ok(r.status),
            Err(e @ ClientError::Unreachable { .. }) => Err(TransportError::Unreachable(e.to_string())),
            // A 503 means the fragment was not applied.
            Err(e) if e.status() == Some(503) => Err(TransportError::Unreachable(e.to_string())),
            Err(e) => Err(TransportError::Ambiguous(e.to_string())),
        }
    }
}
