use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use sas_service::{router, AppState, ServiceConfig};

fn app_with(config: ServiceConfig) -> Router {
    router(AppState::open(config).unwrap())
}

fn app() -> Router {
    app_with(ServiceConfig::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

/// Parses a finished SSE body into (event, data) pairs.
async fn sse(app: &Router, uri: &str) -> Vec<(String, Value)> {
    let req = Request::builder().uri(uri).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    parse_sse(std::str::from_utf8(&bytes).unwrap())
}

fn parse_sse(text: &str) -> Vec<(String, Value)> {
    text.split("\n\n")
        .filter_map(|block| {
            let mut event = String::new();
            let mut data = None;
            for line in block.lines() {
                if let Some(e) = line.strip_prefix("event: ") {
                    event = e.to_string();
                } else if let Some(d) = line.strip_prefix("data: ") {
                    data = Some(serde_json::from_str(d).unwrap());
                }
            }
            data.map(|d| (event, d))
        })
        .collect()
}

async fn pending(app: &Router, key: &str) -> String {
    let (s, v) = call(app, "GET", "/interventions?state=pending", None).await;
    assert_eq!(s, StatusCode::OK);
    v.as_array()
        .unwrap()
        .iter()
        .find(|r| r["key"].as_str().unwrap().starts_with(key))
        .unwrap_or_else(|| panic!("no pending {key} in {v}"))["id"]
        .as_str()
        .unwrap()
        .to_string()
}

async fn start(app: &Router, name: &str) {
    let (s, v) = call(app, "POST", "/scenario/start", Some(json!({"name": name, "interactive": true}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["scenario"], name);
}

async fn advance(app: &Router, minutes: u64) -> Value {
    let (s, v) = call(app, "POST", "/scenario/advance", Some(json!({ "minutes": minutes }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v
}

#[tokio::test]
async fn idle_service_has_no_scenario() {
    let app = app();
    let (s, v) = call(&app, "GET", "/state", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["scenario"], Value::Null);
    let (s, _) = call(&app, "POST", "/whatif", Some(json!({"constraint": "forbid close(sl)"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", "/scenario/start", Some(json!({"name": "nope"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call(&app, "GET", "/scenarios", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn untrusted_device_over_http() {
    let app = app();
    start(&app, "untrusted_device").await;
    let v = advance(&app, 60).await;
    assert_eq!(v["phase"], "awaiting_human");
    let iv = pending(&app, "device_trust:d1").await;

    let (s, _) = call(&app, "POST", "/interventions/iv-404/answer", Some(json!({"answer": false}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", &format!("/interventions/{iv}/answer"), Some(json!({"answer": 3}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let uri = format!("/interventions/{iv}/answer");
    let (s, first) = call(&app, "POST", &uri, Some(json!({"answer": false}))).await;
    assert_eq!(s, StatusCode::OK, "{first}");
    assert_eq!(first["intervention"], iv.as_str());
    let audit_len = call(&app, "GET", "/report", None).await.1["audit"].as_array().unwrap().len();
    let (s, again) = call(&app, "POST", &uri, Some(json!({"answer": false}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again, first);
    let (s, _) = call(&app, "POST", &uri, Some(json!({"answer": true}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(call(&app, "GET", "/report", None).await.1["audit"].as_array().unwrap().len(), audit_len);

    let msgs = sse(&app, "/stream?follow=false").await;
    let kinds: Vec<&str> = msgs.iter().map(|(e, _)| e.as_str()).collect();
    for k in ["event", "anomaly", "intervention", "decision"] {
        assert!(kinds.contains(&k), "{kinds:?}");
    }
    let seqs: Vec<u64> = msgs.iter().map(|(_, d)| d["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    let threat = msgs
        .iter()
        .find(|(e, d)| e == "decision" && d["payload"]["outcome"]["outcome"] == "threat_confirmed")
        .expect("threat_confirmed decision");
    let trace_id = threat.1["payload"]["outcome"]["trace"]["id"].as_str().unwrap().to_string();

    let (s, t) = call(&app, "GET", &format!("/traces/{trace_id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let steps = t["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 4);
    assert_eq!(steps[3]["added"], json!(["in(outsider,home)"]));
    assert_eq!(t["rendered"], "exit(tenant,home)@1, close(sl)@2, open(d1,sl)@3, enter(outsider,home)@4");
    let (s, _) = call(&app, "GET", "/traces/tr-000000000000", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let tail = sse(&app, &format!("/stream?follow=false&since={}", seqs[seqs.len() - 2])).await;
    assert_eq!(tail.len(), 1);

    let approve = pending(&app, "approve_control:").await;
    let (s, _) = call(&app, "POST", &format!("/interventions/{approve}/answer"), Some(json!({"answer": true}))).await;
    assert_eq!(s, StatusCode::OK);
    let v = advance(&app, 1000).await;
    assert_eq!(v["finished"], true);
    assert_eq!(v["enacted_controls"].as_array().unwrap().len(), 3);
    let (_, answered) = call(&app, "GET", "/interventions?state=answered", None).await;
    assert_eq!(answered.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn whatif_reports_breaks_without_mutating() {
    let app = app();
    start(&app, "trusted_speaker").await;
    advance(&app, 30).await;
    let iv = pending(&app, "device_trust:speaker").await;
    let (s, _) = call(&app, "POST", &format!("/interventions/{iv}/answer"), Some(json!({"answer": true}))).await;
    assert_eq!(s, StatusCode::OK);

    let before = call(&app, "GET", "/state", None).await.1;
    let (s, w) = call(&app, "POST", "/whatif", Some(json!({"constraint": "forbid open(X,sl) when net_device(X)"}))).await;
    assert_eq!(s, StatusCode::OK, "{w}");
    assert!(w["breaks_count"].as_u64().unwrap() >= 1);
    assert_eq!(w["breaks_count"].as_u64().unwrap() as usize, w["breaks"].as_array().unwrap().len());
    let after = call(&app, "GET", "/state", None).await.1;
    assert_eq!(before["state_hash"], after["state_hash"]);
    assert_eq!(before, after);

    let (s, _) = call(&app, "POST", "/whatif", Some(json!({"constraint": "forbid open(X,sl) when"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn stream_and_audit_agree() {
    let app = app();
    let (s, _) = call(&app, "POST", "/scenario/start", Some(json!({"name": "mitm_cve", "interactive": false}))).await;
    assert_eq!(s, StatusCode::OK);
    let v = advance(&app, 2000).await;
    assert_eq!(v["finished"], true);
    let report = call(&app, "GET", "/report", None).await.1;
    assert_eq!(report["passed"], true);
    let audit: Vec<u64> = report["audit"].as_array().unwrap().iter().map(|r| r["seq"].as_u64().unwrap()).collect();
    let decisions: Vec<u64> = sse(&app, "/stream?follow=false")
        .await
        .into_iter()
        .filter(|(e, _)| e == "decision")
        .map(|(_, d)| d["payload"]["seq"].as_u64().unwrap())
        .collect();
    assert_eq!(decisions, audit);
}

#[tokio::test]
async fn live_stream_delivers_new_messages() {
    let app = app();
    start(&app, "untrusted_device").await;
    let req = Request::builder().uri("/stream").body(Body::empty()).unwrap();
    let mut body = app.clone().oneshot(req).await.unwrap().into_body();
    advance(&app, 60).await;
    let mut text = String::new();
    let got = tokio::time::timeout(Duration::from_secs(10), async {
        while let Some(frame) = body.frame().await {
            if let Ok(data) = frame.unwrap().into_data() {
                text.push_str(std::str::from_utf8(&data).unwrap());
            }
            if text.contains("event: intervention") {
                return true;
            }
        }
        false
    })
    .await;
    assert_eq!(got, Ok(true), "{text}");

    call(&app, "POST", "/scenario/start", Some(json!({"name": "mitm_cve"}))).await;
    let got = tokio::time::timeout(Duration::from_secs(10), async {
        while let Some(frame) = body.frame().await {
            if let Ok(data) = frame.unwrap().into_data() {
                text.push_str(std::str::from_utf8(&data).unwrap());
            }
            if text.contains("event: reset") {
                return true;
            }
        }
        false
    })
    .await;
    assert_eq!(got, Ok(true));
}

#[tokio::test]
async fn journal_replays_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        data_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    };
    let app = app_with(config.clone());
    start(&app, "untrusted_device").await;
    advance(&app, 60).await;
    let iv = pending(&app, "device_trust:d1").await;
    let uri = format!("/interventions/{iv}/answer");
    let (_, first) = call(&app, "POST", &uri, Some(json!({"answer": false}))).await;
    let before = call(&app, "GET", "/state", None).await.1;
    let report = call(&app, "GET", "/report", None).await.1;
    drop(app);

    let lines = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap().lines().count();
    assert_eq!(lines("commands.jsonl"), 3);
    assert_eq!(lines("events.jsonl"), report["events"].as_array().unwrap().len());
    assert_eq!(lines("audit.jsonl"), report["audit"].as_array().unwrap().len());
    assert_eq!(lines("answers.jsonl"), 1);

    let app = app_with(config.clone());
    let after = call(&app, "GET", "/state", None).await.1;
    assert_eq!(before, after);
    let (s, again) = call(&app, "POST", &uri, Some(json!({"answer": false}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again, first);
    assert_eq!(lines("commands.jsonl"), 3);
    assert_eq!(lines("audit.jsonl"), report["audit"].as_array().unwrap().len());

    advance(&app, 5).await;
    let grown = call(&app, "GET", "/report", None).await.1;
    assert_eq!(lines("commands.jsonl"), 4);
    assert_eq!(lines("events.jsonl"), grown["events"].as_array().unwrap().len());
}
