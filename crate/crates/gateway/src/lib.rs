//! HTTP/JSON gateway over a set of model services.
//!
//! Every route answers JSON; failures use [`ErrorBody`]. Mutating routes
//! honor an optional `Idempotency-Key` header.

mod error;
mod hub;

use std::path::PathBuf;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use driftctl_core::config::Placement;
use driftctl_core::data::ClassId;
use driftctl_core::pipeline::PipelineEvent;
use driftctl_core::registry::VersionId;
use driftctl_core::sim::{simulate, InterferenceModel, Workload};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub use error::{ApiError, ErrorBody};
pub use hub::{fingerprint, Clock, Hub, HubState, Reply};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

#[derive(Clone)]
struct App {
    hub: Hub,
}

/// Builds the route table. Static files under `ui_dir` are served at `/ui`.
pub fn router(hub: Hub, ui_dir: Option<PathBuf>) -> Router {
    let mut r = Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/services", get(list_services))
        .route("/v1/services/{name}/infer", post(infer))
        .route("/v1/services/{name}/label", post(label))
        .route("/v1/services/{name}/labels/pending", get(pending_labels))
        .route("/v1/services/{name}/status", get(status))
        .route("/v1/services/{name}/history", get(history))
        .route("/v1/services/{name}/events", get(events))
        .route("/v1/services/{name}/rollback", post(rollback))
        .route("/v1/services/{name}/policy", put(update_policy).get(get_policy))
        .route("/v1/services/{name}/trace.csv", get(trace_csv))
        .route("/v1/versions/{id}/card", get(card))
        .route("/v1/versions/{id}/approve", post(approve))
        .route("/v1/versions/{id}/reject", post(reject))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") });
    if let Some(dir) = ui_dir {
        r = r.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    r.with_state(App { hub })
}

/// Serves `router` until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router).await
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid_body(e.to_string()))
}

fn idempotency_key(headers: &HeaderMap) -> Option<String> {
    headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string)
}

fn version_id(raw: &str) -> Result<VersionId, ApiError> {
    raw.parse().map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "invalid_path", format!("`{raw}` is not a version id")).with_field("id"))
}

fn ok_json<T: Serialize>(value: &T) -> Result<Reply, ApiError> {
    Reply::json(StatusCode::OK, value)
}

async fn list_services(State(app): State<App>) -> Result<Json<Vec<driftctl_core::pipeline::ServiceStatus>>, ApiError> {
    let all = app.hub.call(|st| st.services().map(|s| s.status().clone()).collect()).await?;
    Ok(Json(all))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InferRequest {
    features: Vec<f64>,
    /// A label known at serving time; the record is collected as labeled.
    #[serde(default)]
    label: Option<ClassId>,
    /// Request time; defaults to the gateway clock.
    #[serde(default)]
    t_ms: Option<u64>,
}

async fn infer(State(app): State<App>, Path(name): Path<String>, headers: HeaderMap, body: Bytes) -> Result<Reply, ApiError> {
    let fp = fingerprint("POST", &format!("/v1/services/{name}/infer"), &body);
    let req: InferRequest = parse(&body)?;
    app.hub
        .mutate(idempotency_key(&headers), fp, move |st| {
            let t = req.t_ms.unwrap_or(0).max(st.now_ms());
            let svc = st.service(&name)?;
            let r = match req.label {
                Some(l) => svc.ingest(req.features, Some(l), t)?,
                None => svc.infer(req.features, t)?,
            };
            ok_json(&r)
        })
        .await
}

fn default_actor() -> String {
    "anonymous".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRequest {
    record_id: u64,
    label: ClassId,
    #[serde(default = "default_actor")]
    actor: String,
}

async fn label(State(app): State<App>, Path(name): Path<String>, headers: HeaderMap, body: Bytes) -> Result<Reply, ApiError> {
    let fp = fingerprint("POST", &format!("/v1/services/{name}/label"), &body);
    let req: LabelRequest = parse(&body)?;
    app.hub
        .mutate(idempotency_key(&headers), fp, move |st| {
            st.service(&name)?.label(req.record_id, req.label, &req.actor)?;
            Ok(Reply::empty())
        })
        .await
}

#[derive(Serialize)]
struct Pending {
    record_ids: Vec<u64>,
}

async fn pending_labels(State(app): State<App>, Path(name): Path<String>) -> Result<Reply, ApiError> {
    app.hub.call(move |st| ok_json(&Pending { record_ids: st.service(&name)?.pending_labels() })).await?
}

async fn status(State(app): State<App>, Path(name): Path<String>) -> Result<Reply, ApiError> {
    app.hub.call(move |st| ok_json(st.service(&name)?.status())).await?
}

async fn history(State(app): State<App>, Path(name): Path<String>) -> Result<Reply, ApiError> {
    app.hub.call(move |st| ok_json(&st.service(&name)?.history())).await?
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    /// Only events with a larger sequence number.
    #[serde(default)]
    after: u64,
}

async fn events(
    State(app): State<App>,
    Path(name): Path<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Reply, ApiError> {
    app.hub
        .call(move |st| {
            let evs: Vec<&PipelineEvent> = st.service(&name)?.events().events().iter().filter(|e| e.seq > q.after).collect();
            ok_json(&evs)
        })
        .await?
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActorBody {
    #[serde(default = "default_actor")]
    actor: String,
}

fn actor_body(body: &[u8]) -> Result<ActorBody, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(ActorBody { actor: default_actor() });
    }
    parse(body)
}

async fn rollback(State(app): State<App>, Path(name): Path<String>, headers: HeaderMap, body: Bytes) -> Result<Reply, ApiError> {
    let fp = fingerprint("POST", &format!("/v1/services/{name}/rollback"), &body);
    let req = actor_body(&body)?;
    app.hub.mutate(idempotency_key(&headers), fp, move |st| ok_json(&st.service(&name)?.rollback(&req.actor)?)).await
}

#[derive(Serialize)]
struct PolicyView<'a> {
    drift_policy: &'a driftctl_core::config::DriftPolicy,
    validation_policy: &'a driftctl_core::config::ValidationPolicy,
}

fn policy_view(cfg: &driftctl_core::config::ServiceConfig) -> Result<Reply, ApiError> {
    ok_json(&PolicyView { drift_policy: &cfg.drift_policy, validation_policy: &cfg.validation_policy })
}

async fn get_policy(State(app): State<App>, Path(name): Path<String>) -> Result<Reply, ApiError> {
    app.hub.call(move |st| policy_view(st.service(&name)?.config())).await?
}

/// Body: `{"actor": ..., "drift_policy": {...}, "validation_policy": {...}}`,
/// both sections optional and partial.
async fn update_policy(
    State(app): State<App>,
    Path(name): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Reply, ApiError> {
    let fp = fingerprint("PUT", &format!("/v1/services/{name}/policy"), &body);
    let mut patch: serde_json::Value = parse(&body)?;
    let obj = patch.as_object_mut().ok_or_else(|| ApiError::invalid_body("expected a JSON object"))?;
    let actor = match obj.remove("actor") {
        None => default_actor(),
        Some(serde_json::Value::String(a)) => a,
        Some(_) => return Err(ApiError::invalid_body("actor must be a string").with_field("actor")),
    };
    app.hub
        .mutate(idempotency_key(&headers), fp, move |st| {
            let cfg = st.service(&name)?.update_policy(patch, &actor)?;
            policy_view(cfg)
        })
        .await
}

#[derive(Debug, Deserialize)]
struct TraceQuery {
    policy: Option<String>,
    #[serde(default)]
    seed: u64,
}

/// Simulated latency/utilization trace for the service's cluster policy.
async fn trace_csv(State(app): State<App>, Path(name): Path<String>, Query(q): Query<TraceQuery>) -> Result<Response, ApiError> {
    let cluster = app.hub.call(move |st| st.service(&name).map(|s| s.config().cluster_policy.clone())).await??;
    let placement = match q.policy {
        None => cluster.placement,
        Some(p) => serde_json::from_value::<Placement>(serde_json::Value::String(p.clone()))
            .map_err(|_| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_policy", format!("unknown placement `{p}`")).with_field("policy"))?,
    };
    let csv = tokio::task::spawn_blocking(move || {
        simulate(&Workload::from_policy(&cluster), placement, &InterferenceModel::from(&cluster.interference), q.seed)
            .map(|t| t.to_csv())
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_workload", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

#[derive(Debug, Deserialize)]
struct VersionQuery {
    service: Option<String>,
}

async fn card(State(app): State<App>, Path(id): Path<String>, Query(q): Query<VersionQuery>) -> Result<Reply, ApiError> {
    let id = version_id(&id)?;
    app.hub
        .call(move |st| {
            let name = st.resolve_version(id, q.service.as_deref())?;
            let view = st.service(&name)?.card(id).ok_or_else(|| ApiError::unknown_version(id))?;
            ok_json(&view)
        })
        .await?
}

async fn approve(
    State(app): State<App>,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Reply, ApiError> {
    verdict(app, id, q, headers, body, true).await
}

async fn reject(
    State(app): State<App>,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Reply, ApiError> {
    verdict(app, id, q, headers, body, false).await
}

async fn verdict(app: App, raw_id: String, q: VersionQuery, headers: HeaderMap, body: Bytes, accept: bool) -> Result<Reply, ApiError> {
    let id = version_id(&raw_id)?;
    let action = if accept { "approve" } else { "reject" };
    let scope = q.service.as_deref().unwrap_or("");
    let fp = fingerprint("POST", &format!("/v1/versions/{id}/{action}?service={scope}"), &body);
    let req = actor_body(&body)?;
    app.hub
        .mutate(idempotency_key(&headers), fp, move |st| {
            let name = st.resolve_version(id, q.service.as_deref())?;
            let svc = st.service(&name)?;
            let row = if accept { svc.approve(id, &req.actor)? } else { svc.reject(id, &req.actor)? };
            ok_json(&row)
        })
        .await
}
