use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use driftctl_core::config::{ModelSpec, ServiceConfig};
use driftctl_core::pipeline::{PipelineEvent, Service, ServiceOptions, ServiceStatus};
use driftctl_core::synthetic::ShiftStream;
use driftctl_gateway::{router, Clock, Hub};
use http_body_util::BodyExt;
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;

const DIM: usize = 4;

#[derive(Debug, Clone)]
enum Op {
    Infer { features: Vec<f64>, label: Option<u32> },
    LabelPending { label: u32 },
    Policy { threshold: f64, manual: bool },
    Rollback,
    /// Resend the previous mutation with its key.
    Retry,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => (prop::collection::vec(-3.0f64..3.0, DIM - 1..=DIM + 1), prop::option::of(0u32..3))
            .prop_map(|(features, label)| Op::Infer { features, label }),
        2 => (0u32..3).prop_map(|label| Op::LabelPending { label }),
        1 => (0.0f64..1.5, any::<bool>()).prop_map(|(threshold, manual)| Op::Policy { threshold, manual }),
        1 => Just(Op::Rollback),
        2 => Just(Op::Retry),
    ]
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<&Value>, key: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    if let Some(k) = key {
        req = req.header("Idempotency-Key", k);
    }
    let body = body.map_or(Body::empty(), |v| Body::from(v.to_string()));
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() })
}

async fn event_count(app: &Router) -> usize {
    send(app, Method::GET, "/v1/services/svc/events", None, None).await.1.as_array().unwrap().len()
}

fn app() -> Router {
    let cfg = ServiceConfig::with_defaults("svc", ModelSpec { input_dim: DIM, hidden_dim: 0, num_classes: 2, param_count: 0 });
    let history = ShiftStream::stationary(DIM, 500).generate(5);
    let svc = Service::bootstrap(cfg, &history, ServiceOptions { seed: 5, ..ServiceOptions::default() }).unwrap();
    router(Hub::spawn(vec![svc], Clock::Manual), None)
}

async fn exercise(ops: Vec<Op>) -> Result<(), TestCaseError> {
    let app = app();
    let mut last: Option<(Method, String, Option<Value>, String, (StatusCode, Value))> = None;
    for (i, op) in ops.into_iter().enumerate() {
        let key = format!("k{i}");
        let (method, uri, body) = match op.clone() {
            Op::Infer { features, label } => {
                let mut b = json!({"features": features, "t_ms": i as u64 * 10});
                if let Some(l) = label {
                    b["label"] = json!(l);
                }
                (Method::POST, "/v1/services/svc/infer".to_string(), Some(b))
            }
            Op::LabelPending { label } => {
                let (_, p) = send(&app, Method::GET, "/v1/services/svc/labels/pending", None, None).await;
                let Some(id) = p["record_ids"].as_array().and_then(|a| a.first().cloned()) else { continue };
                (Method::POST, "/v1/services/svc/label".to_string(), Some(json!({"record_id": id, "label": label})))
            }
            Op::Policy { threshold, manual } => (
                Method::PUT,
                "/v1/services/svc/policy".to_string(),
                Some(json!({"drift_policy": {"magnitude_threshold": threshold},
                            "validation_policy": {"require_manual_approval": manual}})),
            ),
            Op::Rollback => (Method::POST, "/v1/services/svc/rollback".to_string(), None),
            Op::Retry => {
                let Some((m, u, b, k, first)) = last.clone() else { continue };
                let before = event_count(&app).await;
                let again = send(&app, m, &u, b.as_ref(), Some(&k)).await;
                prop_assert_eq!(&again, &first);
                prop_assert_eq!(event_count(&app).await, before);
                continue;
            }
        };
        let resp = send(&app, method.clone(), &uri, body.as_ref(), Some(&key)).await;
        if let Op::Policy { threshold, .. } = op {
            prop_assert_eq!(resp.0.is_success(), threshold <= 1.0);
        }
        if !resp.0.is_success() {
            prop_assert!(resp.1["code"].is_string() && resp.1["message"].is_string());
        }
        last = Some((method, uri, body, key, resp));
    }

    let (_, status) = send(&app, Method::GET, "/v1/services/svc/status", None, None).await;
    let (_, evs) = send(&app, Method::GET, "/v1/services/svc/events", None, None).await;
    let evs: Vec<PipelineEvent> = serde_json::from_value(evs).unwrap();
    prop_assert_eq!(serde_json::to_value(ServiceStatus::replay("svc", &evs)).unwrap(), status);
    let (_, hist) = send(&app, Method::GET, "/v1/services/svc/history", None, None).await;
    let ids: Vec<u64> = hist.as_array().unwrap().iter().map(|r| r["version_id"].as_u64().unwrap()).collect();
    prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn retries_replay_and_status_follows_the_log(ops in prop::collection::vec(op(), 1..60)) {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(exercise(ops))?;
    }
}
