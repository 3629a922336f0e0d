//! Recorded webhook fixtures and scripted simulator scenarios.
//!
//! A fixture is one recorded delivery:
//! `{"hook": "multibranch"|"lifecycle", "event": "<X-GitHub-Event>", "delivery": "<id>"?, "payload": {...}}`.
//!
//! A scenario drives an in-process sim service through a list of steps and
//! reports the final state; optional expectations turn it into a check.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::app::App;
use crate::backend::{Backend, BackendKind, Cluster, SimProgram, TaskStatus, REF_TAG};
use crate::config::Config;
use crate::engine::{CleanupRecord, ConflictingCommits, DirectorySource, Outcome};
use crate::gateway::{EventKind, Hook, HookOutcome, PipelineEvent};
use crate::notifier::Notification;
use crate::portal::{live_environments, LiveEnvironment};
use crate::reporting::Totals;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("step {step}: {reason}")]
    Step { step: usize, reason: String },
    #[error(transparent)]
    App(#[from] crate::app::AppError),
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_owned(), source })?;
    serde_json::from_str(&text).map_err(|source| ScenarioError::Parse { path: path.to_owned(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    pub hook: Hook,
    pub event: Option<String>,
    #[serde(default)]
    pub delivery: Option<String>,
    pub payload: Value,
}

impl Fixture {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        read_json(path)
    }

    pub fn body(&self) -> Vec<u8> {
        serde_json::to_vec(&self.payload).expect("json value serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticEvent {
    pub kind: EventKind,
    #[serde(rename = "ref")]
    pub name: String,
    #[serde(default)]
    pub commit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Deliver a fixture file through the gateway.
    Fixture(PathBuf),
    /// Schedule an event directly, bypassing payload parsing.
    Event(SyntheticEvent),
    /// Wait until the engine is quiescent.
    WaitIdle,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    /// Ref names with a live environment at the end, in any order.
    pub environments: Option<Vec<String>>,
    /// Outcome of every run, in creation order.
    pub outcomes: Option<Vec<Outcome>>,
    pub notifications: Option<usize>,
    /// Report totals of the last run that produced a report.
    pub last_totals: Option<Totals>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub description: String,
    /// Source tree served to the checkout stage, relative to the scenario file.
    pub source: PathBuf,
    #[serde(default)]
    pub build_targets: Option<Vec<String>>,
    #[serde(default)]
    pub strict_tests: bool,
    #[serde(default)]
    pub programs: Vec<SimProgram>,
    /// Pull-request head commits whose projected merge conflicts.
    #[serde(default)]
    pub conflicting_commits: Vec<String>,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub expect: Expect,
}

fn default_tick_ms() -> u64 {
    2
}

pub const REPLAY_TOKEN: &str = "replay-token";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunState {
    pub run_id: String,
    #[serde(rename = "ref")]
    pub ref_name: String,
    pub run_number: u64,
    pub outcome: Outcome,
    pub stages: Vec<String>,
    pub artifacts: Vec<String>,
    pub totals: Option<Totals>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalState {
    pub runs: Vec<RunState>,
    pub environments: Vec<LiveEnvironment>,
    pub cleanups: Vec<CleanupRecord>,
    pub notifications: Vec<Notification>,
    pub running_deploys: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayResult {
    pub description: String,
    pub state: FinalState,
    /// Unmet expectations; empty when the scenario passed.
    pub mismatches: Vec<String>,
}

/// Running deploy-cluster tasks counted per `ref` tag.
pub fn running_deploys(backend: &dyn Backend) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for t in backend.list_tasks(Some(Cluster::Deploy), &Default::default()) {
        if t.status == TaskStatus::Running {
            if let Some(r) = t.tags.get(REF_TAG) {
                *out.entry(r.clone()).or_default() += 1;
            }
        }
    }
    out
}

pub fn final_state(app: &App) -> FinalState {
    let engine = &app.engine;
    FinalState {
        runs: engine
            .runs()
            .into_iter()
            .map(|r| RunState {
                stages: r.stage_summary(),
                run_id: r.run_id,
                ref_name: r.ref_key.to_string(),
                run_number: r.run_number,
                outcome: r.outcome,
                artifacts: r.artifact_paths,
                totals: r.report.map(|rep| rep.totals),
                error: r.error,
            })
            .collect(),
        environments: live_environments(engine),
        cleanups: engine.cleanups(),
        notifications: engine.notifications(),
        running_deploys: running_deploys(engine.backend().as_ref()),
    }
}

/// Delivers a fixture through the gateway's request path.
pub fn deliver(app: &App, fixture: &Fixture, token: &str) -> HookOutcome {
    app.gateway.handle(
        fixture.hook,
        Some(token),
        fixture.event.as_deref(),
        fixture.delivery.as_deref(),
        &fixture.body(),
    )
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let mut s: Scenario = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut s.source);
        for step in &mut s.steps {
            if let Step::Fixture(p) = step {
                fix(p);
            }
        }
        Ok(s)
    }

    /// Runs the scenario against a fresh sim service rooted in `storage`.
    /// Must be called inside a multi-threaded Tokio runtime.
    pub async fn replay(&self, storage: &Path) -> Result<ReplayResult, ScenarioError> {
        let mut cfg = Config::new(storage, &self.source, REPLAY_TOKEN);
        cfg.backend = BackendKind::Sim;
        cfg.sim.tick_ms = self.tick_ms.max(1);
        cfg.sim.programs = self.programs.clone();
        cfg.strict_tests = self.strict_tests;
        cfg.repository = "sample/app".into();
        if let Some(t) = &self.build_targets {
            cfg.build_targets = t.clone();
        }
        let source = ConflictingCommits::new(DirectorySource::new(&self.source), self.conflicting_commits.clone());
        let app = App::build_with_source(&cfg, Arc::new(source))?;
        for (i, step) in self.steps.iter().enumerate() {
            let step_no = i + 1;
            match step {
                Step::Fixture(path) => {
                    let fixture = Fixture::load(path)?;
                    if let HookOutcome::BadRequest(reason) = deliver(&app, &fixture, REPLAY_TOKEN) {
                        return Err(ScenarioError::Step { step: step_no, reason });
                    }
                }
                Step::Event(ev) => {
                    if ev.name.is_empty() {
                        return Err(ScenarioError::Step { step: step_no, reason: "empty ref name".into() });
                    }
                    app.engine.schedule_event(PipelineEvent::synthetic(ev.kind, &ev.name, ev.commit.as_deref()));
                }
                Step::WaitIdle => app.engine.wait_idle().await,
            }
        }
        app.engine.wait_idle().await;
        let state = final_state(&app);
        app.shutdown();
        let mismatches = self.expect.check(&state);
        Ok(ReplayResult { description: self.description.clone(), state, mismatches })
    }
}

impl Expect {
    pub fn check(&self, state: &FinalState) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(want) = &self.environments {
            let mut want = want.clone();
            want.sort();
            let mut got: Vec<String> = state.environments.iter().map(|e| e.ref_key.to_string()).collect();
            got.sort();
            if got != want {
                out.push(format!("environments: expected {want:?}, got {got:?}"));
            }
        }
        if let Some(want) = &self.outcomes {
            let got: Vec<Outcome> = state.runs.iter().map(|r| r.outcome).collect();
            if &got != want {
                out.push(format!("outcomes: expected {want:?}, got {got:?}"));
            }
        }
        if let Some(want) = self.notifications {
            if state.notifications.len() != want {
                out.push(format!("notifications: expected {want}, got {}", state.notifications.len()));
            }
        }
        if let Some(want) = self.last_totals {
            let got = state.runs.iter().rev().find_map(|r| r.totals);
            if got != Some(want) {
                out.push(format!("last totals: expected {want:?}, got {got:?}"));
            }
        }
        out
    }
}
