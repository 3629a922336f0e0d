//! Read-only status API over the engine's run store.
//!
//! Every handler works on snapshots; nothing here mutates the engine, the
//! backend or the workspace.

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;

use crate::backend::{Endpoint, TaskStatus};
use crate::engine::{Engine, Outcome};
use crate::gateway::RefKey;
use crate::reporting::{render_report, ReportFormat};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub run_number: u64,
    #[serde(rename = "ref")]
    pub ref_key: RefKey,
    pub outcome: Outcome,
    pub stages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LiveEnvironment {
    #[serde(rename = "ref")]
    pub ref_key: RefKey,
    pub endpoint: Endpoint,
    pub task_id: String,
    pub created_by_run: String,
}

pub fn run_summaries(engine: &Engine) -> Vec<RunSummary> {
    engine
        .runs()
        .into_iter()
        .map(|r| RunSummary {
            stages: r.stage_summary(),
            run_id: r.run_id,
            run_number: r.run_number,
            ref_key: r.ref_key,
            outcome: r.outcome,
        })
        .collect()
}

/// Environment records whose deploy task the backend reports as running.
pub fn live_environments(engine: &Engine) -> Vec<LiveEnvironment> {
    let backend = engine.backend();
    engine
        .environments()
        .into_iter()
        .filter(|e| backend.poll_task(&e.task.task_id).is_ok_and(|h| h.status == TaskStatus::Running))
        .map(|e| LiveEnvironment {
            ref_key: e.ref_key,
            endpoint: e.endpoint,
            task_id: e.task.task_id,
            created_by_run: e.created_by_run,
        })
        .collect()
}

fn not_found(what: &str, id: &str) -> Response {
    (StatusCode::NOT_FOUND, Json(json!({ "error": format!("{what} `{id}` not found") }))).into_response()
}

async fn runs(State(engine): State<Engine>) -> Json<Vec<RunSummary>> {
    Json(run_summaries(&engine))
}

async fn run(State(engine): State<Engine>, Path(id): Path<String>) -> Response {
    match engine.run(&id) {
        Some(run) => Json(run).into_response(),
        None => not_found("run", &id),
    }
}

async fn report_html(State(engine): State<Engine>, Path(id): Path<String>) -> Response {
    match engine.run(&id) {
        Some(run) => match run.report {
            Some(report) => {
                ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], render_report(&report, ReportFormat::Html))
                    .into_response()
            }
            None => not_found("report for run", &id),
        },
        None => not_found("run", &id),
    }
}

async fn environments(State(engine): State<Engine>) -> Response {
    Json(live_environments(&engine)).into_response()
}

async fn notifications(State(engine): State<Engine>) -> Response {
    Json(engine.notifications()).into_response()
}

async fn cleanups(State(engine): State<Engine>) -> Response {
    Json(engine.cleanups()).into_response()
}

async fn cleanup(State(engine): State<Engine>, Path(id): Path<String>) -> Response {
    match engine.cleanup(&id) {
        Some(c) => Json(c).into_response(),
        None => not_found("cleanup", &id),
    }
}

async fn healthz(State(engine): State<Engine>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "idle": engine.is_idle() }))
}

pub fn router(engine: Engine) -> Router {
    Router::new()
        .route("/runs", get(runs))
        .route("/runs/{id}", get(run))
        .route("/runs/{id}/report.html", get(report_html))
        .route("/environments", get(environments))
        .route("/notifications", get(notifications))
        .route("/cleanups", get(cleanups))
        .route("/cleanups/{delivery_id}", get(cleanup))
        .route("/healthz", get(healthz))
        .with_state(engine)
}
