use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use medlog::collector::{Collector, CollectorConfig, IngestStatus};
use medlog::policy::CapturePolicy;
use medlog::spool::{Backoff, EnqueueOptions, Spool, SpoolConfig};
use medlog::store::{RecordView, ScanFilter, Store, StoreConfig};
use medlog::testkit::*;
use medlog::*;
use medlog_http::{spawn, Client, ClientError, ServerConfig, ServerHandle, OPENAPI, PATHS};

fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn start_server(dir: &std::path::Path) -> (ServerHandle, Client, Arc<Collector>) {
    let store = Store::open(dir, StoreConfig::default()).unwrap();
    let c = Arc::new(
        Collector::new(store, CapturePolicy::default(), Arc::new(SystemClock), CollectorConfig::default()).unwrap(),
    );
    let server = spawn(c.clone(), local(), ServerConfig::default()).unwrap();
    let client = Client::new(&server.base_url(), Duration::from_secs(5));
    (server, client, c)
}

fn post(client: &Client, env: &FragmentEnvelope) -> medlog::collector::IngestResponse {
    client
        .ingest(env.fragment_kind.as_str(), &serde_json::to_vec(env).unwrap())
        .unwrap()
}

fn raw_post(base: &str, path: &str, body: &[u8]) -> (u16, serde_json::Value) {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut r = agent.post(&format!("{base}{path}")).send(body).unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_json().unwrap_or(serde_json::Value::Null))
}

#[test]
fn interface_document_lists_every_route() {
    let doc: serde_json::Value = serde_json::from_str(OPENAPI).unwrap();
    let documented: BTreeSet<(String, String)> = doc["paths"]
        .as_object()
        .unwrap()
        .iter()
        .flat_map(|(path, ops)| ops.as_object().unwrap().keys().map(move |m| (m.clone(), path.clone())))
        .collect();
    let served: BTreeSet<(String, String)> = PATHS.iter().map(|(m, p)| (m.to_string(), p.to_string())).collect();
    assert_eq!(documented, served);
}

#[test]
fn ingest_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (server, client, _) = start_server(dir.path());
    let base = server.base_url();
    let start = serde_json::to_vec(&start_env("e1", "s1")).unwrap();

    let (code, body) = raw_post(&base, "/v1/fragments/start", &start);
    assert_eq!((code, body["status"].as_str()), (200, Some("accepted")));
    // Ingestion never echoes record content.
    let keys: BTreeSet<&str> = body.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["event_id", "fragment_id", "status"]));

    let (code, body) = raw_post(&base, "/v1/fragments/start", &start);
    assert_eq!((code, body["status"].as_str()), (200, Some("duplicate")));

    let orphan = serde_json::to_vec(&outcome_env("e2", "oc1", 1)).unwrap();
    let (code, body) = raw_post(&base, "/v1/fragments/outcome", &orphan);
    assert_eq!((code, body["status"].as_str()), (202, Some("quarantined")));

    let mut changed = start_env("e1", "s1");
    changed.payload = start_env_with("e1", "s1", &StartSpec { model_id: "other".into(), ..StartSpec::default() }).payload;
    let (code, body) = raw_post(&base, "/v1/fragments/start", &serde_json::to_vec(&changed).unwrap());
    assert_eq!((code, body["status"].as_str()), (409, Some("conflict")));

    let (code, body) = raw_post(&base, "/v1/fragments/output", &start);
    assert_eq!((code, body["status"].as_str()), (400, Some("invalid")));
    let (code, _) = raw_post(&base, "/v1/fragments/start", b"{not json");
    assert_eq!(code, 400);
    let (code, _) = raw_post(&base, "/v1/fragments/telemetry", &start);
    assert_eq!(code, 400);
    drop(client);
}

#[test]
fn fig1b_sequence_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, client, _) = start_server(dir.path());
    for env in [
        start_env("e1", "s1"),
        artifact_env("e1", "a1", 1),
        output_env("e1", "o1", 2, true, false),
        outcome_env("e1", "oc1", 3),
        feedback_env("e1", "f1", 4),
    ] {
        assert_eq!(post(&client, &env).status, IngestStatus::Accepted);
    }
    let view = client.record("e1").unwrap();
    assert_eq!(view.status(), RecordStatus::Completed);
    assert!(view.conformance() >= ConformanceProfile::Standard);
    let expected = assembly::assemble(fragments(&[
        start_env("e1", "s1"),
        artifact_env("e1", "a1", 1),
        output_env("e1", "o1", 2, true, false),
        outcome_env("e1", "oc1", 3),
        feedback_env("e1", "f1", 4),
    ]));
    assert_eq!(view.digest(), record_digest(&expected.records["e1"]));

    let err = client.record("nope").unwrap_err();
    assert_eq!(err.status(), Some(404));
}

#[test]
fn query_and_run_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, client, _) = start_server(dir.path());
    let run = |eid: &str, parent: Option<&str>| {
        start_env_with(
            eid,
            &format!("{eid}/s"),
            &StartSpec {
                run_id: Some("run-1".into()),
                parent_event_id: parent.map(str::to_owned),
                ..StartSpec::default()
            },
        )
    };
    post(&client, &run("root", None));
    post(&client, &run("child-a", Some("root")));
    post(&client, &run("child-b", Some("root")));
    let view = client.run("run-1").unwrap();
    assert_eq!(view.records.len(), 3);
    assert_eq!(view.tree.roots().len(), 1);

    let page = client
        .query(&ScanFilter {
            run_id: Some("run-1".into()),
            page_size: Some(2),
            ..ScanFilter::default()
        })
        .unwrap();
    assert_eq!(page.records.len(), 2);
    assert!(page.next_page_token.is_some());
    let all = client.query_all(&ScanFilter { page_size: Some(2), ..ScanFilter::default() }).unwrap();
    let ids: BTreeSet<&str> = all.iter().map(RecordView::event_id).collect();
    assert_eq!(ids, BTreeSet::from(["child-a", "child-b", "root"]));

    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let r = agent.get(&format!("{}/v1/records?colour=red", client.base())).call().unwrap();
    assert_eq!(r.status().as_u16(), 400);
}

#[test]
fn health_policy_reload_and_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, client, collector) = start_server(dir.path());
    let h = client.health().unwrap();
    assert!(h.healthy);
    assert_eq!((h.orphan_count, h.upgrade_buffer_depth, h.in_flight), (0, 0, 0));

    let err = client.reload_policy(b"{\"rules\": []}").unwrap_err();
    assert_eq!(err.status(), Some(400));
    let ok = br#"{"rules":[{"id":"all","model_pattern":"*","phase":"steady_state","mode":"summary_only"}]}"#;
    assert_eq!(client.reload_policy(ok).unwrap(), 1);
    assert_eq!(collector.policy().rules[0].id, "all");

    let addr = client.put_blob(b"chest x-ray bytes").unwrap();
    assert_eq!(addr, ContentAddress::of(b"chest x-ray bytes"));
    assert_eq!(client.get_blob(&addr.digest).unwrap(), b"chest x-ray bytes");
    assert_eq!(client.get_blob(&"0".repeat(64)).unwrap_err().status(), Some(404));
    assert_eq!(client.get_blob("xyz").unwrap_err().status(), Some(400));

    collector.store().set_read_only(true);
    let h = client.health().unwrap();
    assert!(!h.healthy);
    assert!(!h.reasons.is_empty());
}

#[test]
fn spool_syncs_once_the_collector_is_up() {
    let dir = tempfile::tempdir().unwrap();
    let spool = Spool::open(dir.path().join("spool"), SpoolConfig::default()).unwrap();
    spool.enqueue(start_env("e1", "s1"), EnqueueOptions::default()).unwrap();
    spool.enqueue(output_env("e1", "o1", 1, true, false), EnqueueOptions::default()).unwrap();
    let quick = Backoff { initial: Duration::ZERO, max_passes: 2, ..Backoff::default() };

    // Nothing is listening on this port once the listener is dropped.
    let dead = std::net::TcpListener::bind(local()).unwrap().local_addr().unwrap();
    let offline = Client::new(&format!("http://{dead}"), Duration::from_millis(500));
    assert!(matches!(offline.health(), Err(ClientError::Unreachable { .. })));
    let r = spool.sync(&offline, 16, quick).unwrap();
    assert_eq!((r.sent, r.remaining), (0, 2));

    let (_server, client, _) = start_server(&dir.path().join("store"));
    let r = spool.sync(&client, 16, quick).unwrap();
    assert_eq!((r.sent, r.acked, r.remaining), (2, 2, 0));
    assert_eq!(client.record("e1").unwrap().status(), RecordStatus::Completed);
}

#[test]
fn shutdown_drains_and_refuses_new_connections() {
    let dir = tempfile::tempdir().unwrap();
    let (server, client, collector) = start_server(dir.path());
    post(&client, &start_env("e1", "s1"));
    server.shutdown().unwrap();
    assert_eq!(collector.in_flight(), 0);
    assert!(collector.health().draining);
    assert!(matches!(
        client.ingest("start", &serde_json::to_vec(&start_env("e2", "s2")).unwrap()),
        Err(ClientError::Unreachable { .. })
    ));
}
