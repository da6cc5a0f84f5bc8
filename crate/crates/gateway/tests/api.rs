use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use driftctl_core::config::{ModelSpec, ServiceConfig};
use driftctl_core::pipeline::{PipelineEvent, Service, ServiceOptions, ServiceStatus};
use driftctl_core::synthetic::ShiftStream;
use driftctl_gateway::{router, Clock, ErrorBody, Hub};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const DIM: usize = 10;

fn config(name: &str) -> ServiceConfig {
    ServiceConfig::with_defaults(name, ModelSpec { input_dim: DIM, hidden_dim: 0, num_classes: 2, param_count: 0 })
}

fn service(cfg: ServiceConfig, seed: u64) -> Service {
    let history = ShiftStream::stationary(DIM, 500).generate(99);
    Service::bootstrap(cfg, &history, ServiceOptions { seed, ..ServiceOptions::default() }).unwrap()
}

fn app(services: Vec<Service>) -> Router {
    router(Hub::spawn(services, Clock::Manual), None)
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>, key: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header("Idempotency-Key", k);
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into())) };
    (status, value)
}

fn error(v: &Value) -> ErrorBody {
    serde_json::from_value(v.clone()).unwrap()
}

#[tokio::test]
async fn fresh_status_and_history() {
    let app = app(vec![service(config("digits"), 1)]);
    let (code, body) = send(&app, Method::GET, "/v1/services/digits/status", None, None).await;
    assert_eq!(code, StatusCode::OK);
    let s: ServiceStatus = serde_json::from_value(body).unwrap();
    assert_eq!((s.learned_classes, s.drift_magnitude, s.deployed_version), (2, 0.0, Some(1)));

    let (_, hist) = send(&app, Method::GET, "/v1/services/digits/history", None, None).await;
    assert_eq!(hist[0]["status"], "deployed");
    assert_eq!(hist[0]["verdict"], "accepted");

    let (code, all) = send(&app, Method::GET, "/v1/services", None, None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(all.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn errors_share_one_shape() {
    let app = app(vec![service(config("digits"), 1)]);
    let (code, body) = send(&app, Method::POST, "/v1/services/nope/infer", Some(json!({"features": vec![0.0; DIM]})), None).await;
    assert_eq!((code, error(&body).code.as_str()), (StatusCode::NOT_FOUND, "unknown_service"));

    let (code, body) = send(&app, Method::POST, "/v1/services/digits/infer", Some(json!({"features": [1.0, 2.0]})), None).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(&body).field.as_deref(), Some("features"));

    let (code, body) = send(&app, Method::POST, "/v1/services/digits/infer", Some(json!({"feat": []})), None).await;
    assert_eq!((code, error(&body).code.as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "invalid_body"));

    let (code, body) = send(&app, Method::GET, "/v1/versions/abc/card", None, None).await;
    assert_eq!((code, error(&body).code.as_str()), (StatusCode::BAD_REQUEST, "invalid_path"));

    let (code, body) = send(&app, Method::GET, "/v1/versions/7/card", None, None).await;
    assert_eq!((code, error(&body).code.as_str()), (StatusCode::NOT_FOUND, "unknown_version"));

    let (code, body) = send(&app, Method::POST, "/v1/services/digits/rollback", Some(json!({"actor": "ops"})), None).await;
    assert_eq!((code, error(&body).code.as_str()), (StatusCode::CONFLICT, "nothing_to_roll_back"));

    let (code, body) = send(&app, Method::GET, "/nowhere", None, None).await;
    assert_eq!((code, error(&body).code.as_str()), (StatusCode::NOT_FOUND, "not_found"));
}

#[tokio::test]
async fn labeling_round_trip() {
    let app = app(vec![service(config("digits"), 1)]);
    let mut x = vec![0.0; DIM];
    x[0] = 0.01;
    let (_, r) = send(&app, Method::POST, "/v1/services/digits/infer", Some(json!({"features": x})), None).await;
    let id = r["record_id"].as_u64().unwrap();
    assert!(r["confidence"].as_f64().unwrap() < 0.6);
    let (_, pending) = send(&app, Method::GET, "/v1/services/digits/labels/pending", None, None).await;
    assert_eq!(pending["record_ids"], json!([id]));

    let label = json!({"record_id": id, "label": 1, "actor": "annotator"});
    let (code, body) = send(&app, Method::POST, "/v1/services/digits/label", Some(label.clone()), None).await;
    assert_eq!((code, body), (StatusCode::NO_CONTENT, Value::Null));
    let (code, body) = send(&app, Method::POST, "/v1/services/digits/label", Some(label), None).await;
    assert_eq!((code, error(&body).code.as_str()), (StatusCode::CONFLICT, "already_labeled"));
    let (code, _) =
        send(&app, Method::POST, "/v1/services/digits/label", Some(json!({"record_id": 424242, "label": 0})), None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn policy_edits_are_validated() {
    let app = app(vec![service(config("digits"), 1)]);
    let (code, body) = send(
        &app,
        Method::PUT,
        "/v1/services/digits/policy",
        Some(json!({"actor": "ops", "drift_policy": {"magnitude_threshold": 1.5}})),
        None,
    )
    .await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(&body).field.as_deref(), Some("magnitude_threshold"));

    let (code, body) =
        send(&app, Method::PUT, "/v1/services/digits/policy", Some(json!({"drift_policy": {"magnitude_threshold": 0.01}})), None)
            .await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body["drift_policy"]["magnitude_threshold"], 0.01);
    let (_, events) = send(&app, Method::GET, "/v1/services/digits/events", None, None).await;
    let last = events.as_array().unwrap().last().unwrap();
    assert_eq!((last["kind"].as_str(), last["actor"].as_str()), (Some("policy_updated"), Some("anonymous")));
}

#[tokio::test]
async fn idempotent_retries() {
    let app = app(vec![service(config("digits"), 1)]);
    let req = json!({"features": vec![0.5; DIM]});
    let (c1, first) = send(&app, Method::POST, "/v1/services/digits/infer", Some(req.clone()), Some("k-1")).await;
    let (c2, again) = send(&app, Method::POST, "/v1/services/digits/infer", Some(req.clone()), Some("k-1")).await;
    assert_eq!((c1, c2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(first, again);
    let (_, fresh) = send(&app, Method::POST, "/v1/services/digits/infer", Some(req), Some("k-2")).await;
    assert_eq!(fresh["record_id"].as_u64(), first["record_id"].as_u64().map(|i| i + 1));

    let (code, body) =
        send(&app, Method::POST, "/v1/services/digits/infer", Some(json!({"features": vec![0.7; DIM]})), Some("k-1")).await;
    assert_eq!((code, error(&body).code.as_str()), (StatusCode::CONFLICT, "idempotency_conflict"));
    // a failed mutation replays its failure
    let (c1, e1) = send(&app, Method::POST, "/v1/services/digits/rollback", None, Some("k-3")).await;
    let (c2, e2) = send(&app, Method::POST, "/v1/services/digits/rollback", None, Some("k-3")).await;
    assert_eq!((c1, e1), (c2, e2));
}

async fn stream_shift(app: &Router, name: &str, seed: u64) {
    let rows = ShiftStream::new_classes(DIM, 5000, 2500).generate(seed);
    for (i, row) in rows[500..].iter().enumerate() {
        let t = (i as u64 + 1) * 10;
        let body = json!({"features": row.features, "label": row.label, "t_ms": t});
        let (code, _) = send(app, Method::POST, &format!("/v1/services/{name}/infer"), Some(body), None).await;
        assert_eq!(code, StatusCode::OK);
    }
}

#[tokio::test]
async fn manual_gate_through_the_api() {
    let mut cfg = config("digits");
    cfg.validation_policy.require_manual_approval = true;
    let app = app(vec![service(cfg, 2)]);
    stream_shift(&app, "digits", 2).await;
    // let the simulated job finish
    send(&app, Method::POST, "/v1/services/digits/infer", Some(json!({"features": vec![0.0; DIM], "t_ms": 10_000_000})), None).await;

    let (_, hist) = send(&app, Method::GET, "/v1/services/digits/history", None, None).await;
    let ids: Vec<u64> = hist.as_array().unwrap().iter().map(|r| r["version_id"].as_u64().unwrap()).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(hist[1]["verdict"], "pending_manual");
    assert_eq!(hist[1]["status"], "candidate");

    let (code, c) = send(&app, Method::GET, "/v1/versions/2/card", None, None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(c["card"]["scenario"], "NC");
    assert!(c["query"].as_str().unwrap().starts_with("SELECT"));

    let (code, row) = send(&app, Method::POST, "/v1/versions/2/approve", Some(json!({"actor": "qa"})), None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!((row["status"].as_str(), row["verdict"].as_str()), (Some("deployed"), Some("accepted")));
    let (_, s) = send(&app, Method::GET, "/v1/services/digits/status", None, None).await;
    assert_eq!(s["learned_classes"], 4);

    // the served status is exactly the fold of the served log
    let (_, evs) = send(&app, Method::GET, "/v1/services/digits/events", None, None).await;
    let evs: Vec<PipelineEvent> = serde_json::from_value(evs).unwrap();
    let replayed = ServiceStatus::replay("digits", &evs);
    assert_eq!(serde_json::to_value(replayed).unwrap(), s);

    let (code, row) = send(&app, Method::POST, "/v1/services/digits/rollback", Some(json!({"actor": "ops"})), None).await;
    assert_eq!((code, row["version_id"].as_u64()), (StatusCode::OK, Some(1)));
}

#[tokio::test]
async fn version_ids_are_scoped_by_service() {
    let app = app(vec![service(config("a"), 1), service(config("b"), 1)]);
    let (code, body) = send(&app, Method::GET, "/v1/versions/1/card", None, None).await;
    assert_eq!((code, error(&body).field.as_deref()), (StatusCode::CONFLICT, Some("service")));
    let (code, body) = send(&app, Method::GET, "/v1/versions/1/card?service=b", None, None).await;
    assert_eq!((code, body["service"].as_str()), (StatusCode::OK, Some("b")));
}

#[tokio::test]
async fn trace_and_static_files() {
    let dir = tempfile_dir();
    std::fs::write(dir.join("index.html"), "<html>console</html>").unwrap();
    let app = router(Hub::spawn(vec![service(config("digits"), 1)], Clock::Manual), Some(dir.clone()));
    let resp = app.clone().oneshot(Request::get("/ui/").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let text = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&text[..], b"<html>console</html>");

    let resp = app.clone().oneshot(Request::get("/v1/services/digits/trace.csv?seed=3").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let csv = resp.into_body().collect().await.unwrap().to_bytes();
    assert!(csv.starts_with(b"t_ms,kind,worker,latency_ms,utilization\n"));
    let (code, _) = send(&app, Method::GET, "/v1/services/digits/trace.csv?policy=bogus", None, None).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("driftctl-ui-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
