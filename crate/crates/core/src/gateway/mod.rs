//! Webhook ingress.
//!
//! Two hook endpoints mirror the source-host configuration: the multibranch
//! hook receives push events and feeds the main pipeline, the lifecycle hook
//! receives branch deletions and pull-request events. Both authenticate with
//! a pre-shared `token` query parameter.

mod event;
mod refkey;

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use chrono::Utc;
use serde_json::{json, Value};
use subtle::ConstantTimeEq;
use tokio::sync::mpsc;

pub use event::{normalize_event, EventDraft, EventKind, MalformedPayload, Normalized, PipelineEvent};
pub use refkey::{is_safe_id, make_ref_key, RefKey, RefKind, SAFE_ID_MAX_LEN};

pub const MULTIBRANCH_PATH: &str = "/hooks/multibranch/invoke";
pub const LIFECYCLE_PATH: &str = "/hooks/lifecycle/invoke";
pub const EVENT_HEADER: &str = "x-github-event";
pub const DELIVERY_HEADER: &str = "x-github-delivery";
pub const DEFAULT_DELIVERY_WINDOW: usize = 1000;

/// Receiver side of the engine's intake queue.
pub trait EventSink: Send + Sync {
    fn enqueue(&self, event: PipelineEvent);
}

impl EventSink for mpsc::UnboundedSender<PipelineEvent> {
    fn enqueue(&self, event: PipelineEvent) {
        if self.send(event).is_err() {
            tracing::error!("engine intake closed; event dropped");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hook {
    Multibranch,
    Lifecycle,
}

impl Hook {
    pub fn path(self) -> &'static str {
        match self {
            Hook::Multibranch => MULTIBRANCH_PATH,
            Hook::Lifecycle => LIFECYCLE_PATH,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HookOutcome {
    Accepted(PipelineEvent),
    Ignored(String),
    Unauthorized,
    BadRequest(String),
}

impl HookOutcome {
    pub fn status(&self) -> StatusCode {
        match self {
            HookOutcome::Accepted(_) => StatusCode::OK,
            HookOutcome::Ignored(_) => StatusCode::ACCEPTED,
            HookOutcome::Unauthorized => StatusCode::FORBIDDEN,
            HookOutcome::BadRequest(_) => StatusCode::BAD_REQUEST,
        }
    }

    pub fn body(&self) -> Value {
        match self {
            HookOutcome::Accepted(e) => json!({ "delivery_id": e.delivery_id }),
            HookOutcome::Ignored(reason) => json!({ "ignored": reason }),
            HookOutcome::Unauthorized => json!({ "error": "invalid token" }),
            HookOutcome::BadRequest(reason) => json!({ "error": reason }),
        }
    }
}

impl IntoResponse for HookOutcome {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

/// Sliding window of recently accepted delivery ids.
#[derive(Debug)]
struct DeliveryWindow {
    capacity: usize,
    order: VecDeque<String>,
    members: HashSet<String>,
}

impl DeliveryWindow {
    fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), order: VecDeque::new(), members: HashSet::new() }
    }

    /// Returns false if the id is already in the window.
    fn insert(&mut self, id: &str) -> bool {
        if self.members.contains(id) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.members.remove(&old);
            }
        }
        self.order.push_back(id.to_owned());
        self.members.insert(id.to_owned());
        true
    }
}

pub struct Gateway {
    token: String,
    sink: Arc<dyn EventSink>,
    deliveries: Mutex<DeliveryWindow>,
}

impl Gateway {
    pub fn new(token: impl Into<String>, sink: Arc<dyn EventSink>) -> Self {
        Self::with_window(token, sink, DEFAULT_DELIVERY_WINDOW)
    }

    pub fn with_window(token: impl Into<String>, sink: Arc<dyn EventSink>, window: usize) -> Self {
        Self { token: token.into(), sink, deliveries: Mutex::new(DeliveryWindow::new(window)) }
    }

    fn token_matches(&self, presented: Option<&str>) -> bool {
        let Some(presented) = presented else { return false };
        bool::from(presented.as_bytes().ct_eq(self.token.as_bytes()))
    }

    /// Processes one hook request. Exactly one event is enqueued when the
    /// outcome is `Accepted`, none otherwise.
    pub fn handle(
        &self,
        hook: Hook,
        token: Option<&str>,
        event_name: Option<&str>,
        delivery_id: Option<&str>,
        body: &[u8],
    ) -> HookOutcome {
        if !self.token_matches(token) {
            tracing::warn!(?hook, "webhook rejected: token mismatch");
            return HookOutcome::Unauthorized;
        }
        let payload: Value = match serde_json::from_slice(body) {
            Ok(v) => v,
            Err(err) => return HookOutcome::BadRequest(format!("unparseable body: {err}")),
        };
        let name = match (hook, event_name) {
            (Hook::Multibranch, None) => "push",
            (Hook::Multibranch, Some("push")) => "push",
            (Hook::Multibranch, Some(other)) => {
                return HookOutcome::Ignored(format!("`{other}` is not a push event"));
            }
            (Hook::Lifecycle, None) => {
                return HookOutcome::BadRequest("missing X-GitHub-Event header".into());
            }
            (Hook::Lifecycle, Some("push")) => {
                return HookOutcome::Ignored("push events belong to the multibranch hook".into());
            }
            (Hook::Lifecycle, Some(name)) => name,
        };
        let draft = match normalize_event(name, &payload) {
            Ok(Normalized::Event(draft)) => draft,
            Ok(Normalized::Ignored(reason)) => return HookOutcome::Ignored(reason),
            Err(err) => return HookOutcome::BadRequest(err.to_string()),
        };
        let delivery_id = delivery_id
            .map(str::to_owned)
            .unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
        {
            let mut window = self.deliveries.lock().expect("delivery window poisoned");
            if !window.insert(&delivery_id) {
                return HookOutcome::Ignored(format!("duplicate delivery `{delivery_id}`"));
            }
        }
        let event = draft.stamp(delivery_id, Utc::now());
        tracing::info!(kind = ?event.kind, r#ref = %event.ref_key.name, delivery = %event.delivery_id, "webhook accepted");
        self.sink.enqueue(event.clone());
        HookOutcome::Accepted(event)
    }

    pub fn router(self: Arc<Self>) -> Router {
        Router::new()
            .route(MULTIBRANCH_PATH, post(multibranch_hook))
            .route(LIFECYCLE_PATH, post(lifecycle_hook))
            .with_state(self)
    }
}

fn header<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

async fn multibranch_hook(
    State(gw): State<Arc<Gateway>>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Bytes,
) -> HookOutcome {
    gw.handle(
        Hook::Multibranch,
        query.get("token").map(String::as_str),
        header(&headers, EVENT_HEADER),
        header(&headers, DELIVERY_HEADER),
        &body,
    )
}

async fn lifecycle_hook(
    State(gw): State<Arc<Gateway>>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Bytes,
) -> HookOutcome {
    gw.handle(
        Hook::Lifecycle,
        query.get("token").map(String::as_str),
        header(&headers, EVENT_HEADER),
        header(&headers, DELIVERY_HEADER),
        &body,
    )
}
