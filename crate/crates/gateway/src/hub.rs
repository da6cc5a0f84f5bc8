//! Single-writer owner of every service.
//!
//! All handlers, readers included, send closures to one thread that owns the
//! services, so a response always reflects one consistent state and the
//! services never need locks.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::time::Instant;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use driftctl_core::pipeline::Service;
use driftctl_core::registry::VersionId;
use sha2::{Digest, Sha256};
use tokio::sync::{mpsc, oneshot};

use crate::error::ApiError;

/// Idempotency keys remembered before the oldest is forgotten.
const KEY_MEMORY: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    /// Milliseconds since the hub started.
    Wall,
    /// Time moves only when a request supplies `t_ms`.
    Manual,
}

/// A successful response, kept so retries can be replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: StatusCode,
    pub body: Option<serde_json::Value>,
}

impl Reply {
    pub fn json<T: serde::Serialize>(status: StatusCode, value: &T) -> Result<Self, ApiError> {
        let body = serde_json::to_value(value).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Self { status, body: Some(body) })
    }

    pub fn empty() -> Self {
        Self { status: StatusCode::NO_CONTENT, body: None }
    }
}

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        match self.body {
            Some(b) => (self.status, Json(b)).into_response(),
            None => self.status.into_response(),
        }
    }
}

struct Remembered {
    fingerprint: String,
    outcome: Result<Reply, ApiError>,
}

pub struct HubState {
    services: BTreeMap<String, Service>,
    clock: Clock,
    started: Instant,
    remembered: HashMap<String, Remembered>,
    key_order: VecDeque<String>,
}

impl HubState {
    pub fn now_ms(&self) -> u64 {
        match self.clock {
            Clock::Wall => self.started.elapsed().as_millis() as u64,
            Clock::Manual => 0,
        }
    }

    pub fn services(&self) -> impl Iterator<Item = &Service> {
        self.services.values()
    }

    /// The named service, with any training job that is due finished first.
    pub fn service(&mut self, name: &str) -> Result<&mut Service, ApiError> {
        let now = self.now_ms();
        let svc = self.services.get_mut(name).ok_or_else(|| ApiError::unknown_service(name))?;
        svc.advance(now)?;
        Ok(svc)
    }

    /// Finds the service owning `version_id`. Version ids are per service, so
    /// `service` is required when several services have the id.
    pub fn resolve_version(&self, version_id: VersionId, service: Option<&str>) -> Result<String, ApiError> {
        if let Some(name) = service {
            let svc = self.services.get(name).ok_or_else(|| ApiError::unknown_service(name))?;
            return match svc.registry().get(version_id) {
                Some(_) => Ok(name.to_string()),
                None => Err(ApiError::unknown_version(version_id)),
            };
        }
        let owners: Vec<&String> =
            self.services.iter().filter(|(_, s)| s.registry().get(version_id).is_some()).map(|(n, _)| n).collect();
        match owners.as_slice() {
            [] => Err(ApiError::unknown_version(version_id)),
            [one] => Ok((*one).clone()),
            _ => Err(ApiError::new(
                StatusCode::CONFLICT,
                "ambiguous_version",
                format!("version {version_id} exists in several services; pass ?service=<name>"),
            )
            .with_field("service")),
        }
    }

    fn remember(&mut self, key: String, fingerprint: String, outcome: Result<Reply, ApiError>) {
        if self.key_order.len() >= KEY_MEMORY {
            if let Some(old) = self.key_order.pop_front() {
                self.remembered.remove(&old);
            }
        }
        self.key_order.push_back(key.clone());
        self.remembered.insert(key, Remembered { fingerprint, outcome });
    }
}

type Job = Box<dyn FnOnce(&mut HubState) + Send>;

/// Handle to the owner thread. Cheap to clone.
#[derive(Clone)]
pub struct Hub {
    tx: mpsc::UnboundedSender<Job>,
}

impl Hub {
    pub fn spawn(services: Vec<Service>, clock: Clock) -> Self {
        let (tx, mut rx) = mpsc::unbounded_channel::<Job>();
        let mut state = HubState {
            services: services.into_iter().map(|s| (s.name().to_string(), s)).collect(),
            clock,
            started: Instant::now(),
            remembered: HashMap::new(),
            key_order: VecDeque::new(),
        };
        std::thread::Builder::new()
            .name("driftctl-hub".into())
            .spawn(move || {
                while let Some(job) = rx.blocking_recv() {
                    job(&mut state);
                }
            })
            .expect("spawn hub thread");
        Self { tx }
    }

    /// Runs `f` on the owner thread.
    pub async fn call<R, F>(&self, f: F) -> Result<R, ApiError>
    where
        R: Send + 'static,
        F: FnOnce(&mut HubState) -> R + Send + 'static,
    {
        let (done, wait) = oneshot::channel();
        let job: Job = Box::new(move |st| {
            let _ = done.send(f(st));
        });
        self.tx.send(job).map_err(|_| ApiError::internal("hub stopped"))?;
        wait.await.map_err(|_| ApiError::internal("hub dropped the request"))
    }

    /// Runs a mutation at most once per idempotency key.
    ///
    /// A retry with the same key and the same request gets the first outcome
    /// back; the same key on a different request is a conflict.
    pub async fn mutate<F>(&self, key: Option<String>, fingerprint: String, f: F) -> Result<Reply, ApiError>
    where
        F: FnOnce(&mut HubState) -> Result<Reply, ApiError> + Send + 'static,
    {
        self.call(move |st| {
            let Some(key) = key else { return f(st) };
            if let Some(seen) = st.remembered.get(&key) {
                if seen.fingerprint == fingerprint {
                    return seen.outcome.clone();
                }
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "idempotency_conflict",
                    "this Idempotency-Key was already used for a different request",
                ));
            }
            let outcome = f(st);
            st.remember(key, fingerprint, outcome.clone());
            outcome
        })
        .await?
    }
}

/// Identity of a request for idempotency purposes.
pub fn fingerprint(method: &str, path: &str, body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(method.as_bytes());
    h.update([0]);
    h.update(path.as_bytes());
    h.update([0]);
    h.update(body);
    hex::encode(h.finalize())
}
