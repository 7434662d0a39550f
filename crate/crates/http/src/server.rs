use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use medlog::collector::{Collector, IngestError, IngestStatus, ReadError};
use medlog::store::{ScanFilter, StoreError};
use medlog::{ContentAddress, CONTENT_ALGORITHM};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

/// Every route the server exposes, as written in the interface document.
pub const PATHS: [(&str, &str); 9] = [
    ("post", "/v1/fragments/{kind}"),
    ("get", "/v1/records/{event_id}"),
    ("get", "/v1/records"),
    ("get", "/v1/runs/{run_id}"),
    ("get", "/v1/healthz"),
    ("post", "/v1/admin/policy:reload"),
    ("post", "/v1/blobs"),
    ("get", "/v1/blobs/{digest}"),
    ("get", "/v1/openapi.json"),
];

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// How often orphan expiry and the upgrade buffer are swept.
    pub tick_interval: Duration,
    /// How long shutdown waits for in-flight ingests.
    pub drain_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            tick_interval: Duration::from_secs(10),
            drain_timeout: Duration::from_secs(30),
        }
    }
}

type Shared = Arc<Collector>;

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn unavailable(message: impl ToString) -> Response {
    let mut r = error(StatusCode::SERVICE_UNAVAILABLE, message);
    r.headers_mut().insert(header::RETRY_AFTER, header::HeaderValue::from_static("1"));
    r
}

pub fn ingest_status_code(s: IngestStatus) -> StatusCode {
    match s {
        IngestStatus::Accepted | IngestStatus::Duplicate => StatusCode::OK,
        IngestStatus::Quarantined => StatusCode::ACCEPTED,
        IngestStatus::Conflict => StatusCode::CONFLICT,
        IngestStatus::Invalid => StatusCode::BAD_REQUEST,
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, Response> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e))
}

fn read_error(e: ReadError) -> Response {
    match e {
        ReadError::NotFound(_) => error(StatusCode::NOT_FOUND, e),
        ReadError::RunTree(_) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        ReadError::Store(StoreError::Filter(_)) => error(StatusCode::BAD_REQUEST, e),
        ReadError::Store(_) => unavailable(e),
    }
}

async fn ingest(State(c): State<Shared>, Path(kind): Path<String>, body: Bytes) -> Response {
    match blocking(move || c.ingest(&kind, &body)).await {
        Ok(Ok(r)) => (ingest_status_code(r.status), Json(r)).into_response(),
        Ok(Err(e @ IngestError::Draining)) => unavailable(e),
        Ok(Err(IngestError::Store(e))) => unavailable(e),
        Err(r) => r,
    }
}

async fn read_record(State(c): State<Shared>, Path(event_id): Path<String>) -> Response {
    match blocking(move || c.read_record(&event_id)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => read_error(e),
        Err(r) => r,
    }
}

async fn read_run(State(c): State<Shared>, Path(run_id): Path<String>) -> Response {
    match blocking(move || c.read_run(&run_id)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => read_error(e),
        Err(r) => r,
    }
}

async fn query(State(c): State<Shared>, Query(pairs): Query<Vec<(String, String)>>) -> Response {
    let filter = match ScanFilter::from_pairs(pairs) {
        Ok(f) => f,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    match blocking(move || c.query(&filter)).await {
        Ok(Ok(page)) => Json(page).into_response(),
        Ok(Err(e)) => read_error(e),
        Err(r) => r,
    }
}

async fn healthz(State(c): State<Shared>) -> Response {
    match blocking(move || c.health()).await {
        Ok(h) => {
            let code = if h.healthy { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
            (code, Json(h)).into_response()
        }
        Err(r) => r,
    }
}

async fn reload_policy(State(c): State<Shared>, body: Bytes) -> Response {
    match blocking(move || c.reload_policy(&body).map(|()| c.policy().rules.len())).await {
        Ok(Ok(rules)) => Json(json!({ "status": "reloaded", "rules": rules })).into_response(),
        Ok(Err(e)) => error(StatusCode::BAD_REQUEST, e),
        Err(r) => r,
    }
}

async fn put_blob(State(c): State<Shared>, body: Bytes) -> Response {
    match blocking(move || c.store().put_blob(&body)).await {
        Ok(Ok(addr)) => (StatusCode::CREATED, Json(addr)).into_response(),
        Ok(Err(e)) => unavailable(e),
        Err(r) => r,
    }
}

async fn get_blob(State(c): State<Shared>, Path(digest): Path<String>) -> Response {
    let addr = ContentAddress {
        algorithm: CONTENT_ALGORITHM.to_owned(),
        digest,
        size: 0,
    };
    match blocking(move || c.store().get_blob(&addr)).await {
        Ok(Ok(bytes)) => ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Ok(Err(StoreError::Blob(e))) => match e {
            medlog::blob::BlobError::NotFound(_) => error(StatusCode::NOT_FOUND, e),
            medlog::blob::BlobError::BadAddress(_) => error(StatusCode::BAD_REQUEST, e),
            _ => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        },
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(r) => r,
    }
}

async fn openapi() -> Response {
    ([(header::CONTENT_TYPE, "application/json")], crate::OPENAPI).into_response()
}

pub fn router(collector: Arc<Collector>) -> Router {
    Router::new()
        .route("/v1/fragments/{kind}", post(ingest))
        .route("/v1/records/{event_id}", get(read_record))
        .route("/v1/records", get(query))
        .route("/v1/runs/{run_id}", get(read_run))
        .route("/v1/healthz", get(healthz))
        .route("/v1/admin/policy:reload", post(reload_policy))
        .route("/v1/blobs", post(put_blob))
        .route("/v1/blobs/{digest}", get(get_blob))
        .route("/v1/openapi.json", get(openapi))
        .with_state(collector)
}

/// Serve until `shutdown` resolves, then stop accepting ingests, let
/// in-flight requests finish and return.
pub async fn serve(
    listener: TcpListener,
    collector: Arc<Collector>,
    config: ServerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    let ticker = {
        let c = collector.clone();
        tokio::spawn(async move {
            let mut every = tokio::time::interval(config.tick_interval);
            every.tick().await;
            loop {
                every.tick().await;
                let c = c.clone();
                match tokio::task::spawn_blocking(move || c.tick()).await {
                    Ok(Ok(r)) if r.orphans_dead_lettered + r.buffered_artifacts_discarded > 0 => {
                        tracing::info!(
                            orphans = r.orphans_dead_lettered,
                            artifacts = r.buffered_artifacts_discarded,
                            "expired held fragments"
                        );
                    }
                    Ok(Ok(_)) => {}
                    Ok(Err(e)) => tracing::warn!(error = %e, "tick failed"),
                    Err(e) => tracing::warn!(error = %e, "tick panicked"),
                }
            }
        })
    };
    let drain = {
        let c = collector.clone();
        async move {
            shutdown.await;
            tracing::info!("draining");
            c.begin_drain();
        }
    };
    let result = axum::serve(listener, router(collector.clone()))
        .with_graceful_shutdown(drain)
        .await;
    ticker.abort();
    let c = collector.clone();
    let idle = tokio::task::spawn_blocking(move || c.wait_idle(config.drain_timeout))
        .await
        .unwrap_or(false);
    if !idle {
        tracing::warn!(in_flight = collector.in_flight(), "drain timed out");
    }
    result
}

/// A server running on its own runtime thread.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Drain and wait for the server thread to exit.
    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Bind `addr` and serve on a background thread with its own runtime.
pub fn spawn(collector: Arc<Collector>, addr: SocketAddr, config: ServerConfig) -> io::Result<ServerHandle> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = rt.block_on(TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel();
    let thread = std::thread::Builder::new().name("medlog-http".into()).spawn(move || {
        rt.block_on(serve(listener, collector, config, async move {
            let _ = rx.await;
        }))
    })?;
    Ok(ServerHandle {
        addr,
        stop: Some(tx),
        thread: Some(thread),
    })
}

async fn termination() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

/// Serve on `addr` until SIGINT or SIGTERM, then drain. Blocks the caller.
pub fn run_until_signal(collector: Arc<Collector>, addr: SocketAddr, config: ServerConfig) -> io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = TcpListener::bind(addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "collector listening");
        serve(listener, collector, config, termination()).await
    })
}
