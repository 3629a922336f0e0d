//! The main and cleanup pipelines.
//!
//! Every ref gets at most one worker task. The worker drains the ref's
//! queue: cleanups first, then the single pending main run. A new main
//! event for a ref that already has a pending run replaces that run's
//! trigger (coalescing), so at most one run waits behind the active one.
//! A cleanup event aborts the pending run and cancels the active one; the
//! worker then runs the cleanup pipeline once the active run has unwound.

mod run;
mod source;
mod templates;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use chrono::Utc;
use serde::Serialize;
use tokio::sync::{mpsc, watch};
use tokio_util::sync::CancellationToken;

use crate::backend::{
    Backend, Cluster, LaunchRequest, StageTimeout, Tags, TaskHandle, TaskStatus, REF_TAG, RUN_TAG,
};
use crate::gateway::{EventSink, PipelineEvent, RefKey};
use crate::notifier::{Notification, Notifier};
use crate::reporting::{aggregate, TestReport};
use crate::workspace::{Workspace, WorkspaceStore, OUT_DIR};

pub use run::{CleanupRecord, EnvironmentRecord, Outcome, PipelineRun, Stage, StageRecord, StageStatus};
pub use source::{ConflictingCommits, DirectorySource, SourceError, SourceProvider};
pub use templates::{definition_name, render_template, TemplateError, TemplateKind, Templates};

/// Tag carrying the test case name on test-cluster tasks.
pub const CASE_TAG: &str = "case";
/// Directory under the staged sources that holds one test case per file.
pub const TESTS_DIR: &str = "tests";
/// Environment variable carrying the ref name (branch name or PR number)
/// into every task.
pub const BRANCH_NAME_ENV: &str = "BRANCH_NAME";
const LOG_EXCERPT_LINES: usize = 20;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Fallback repository name for notifications when the event has none.
    pub repository: String,
    pub status_api_base: String,
    pub build_targets: Vec<String>,
    pub build_timeout: StageTimeout,
    pub deploy_timeout: StageTimeout,
    pub test_timeout: StageTimeout,
    /// Fail the report stage when any test case did not pass.
    pub strict_tests: bool,
    pub templates: Templates,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            repository: "local/repository".into(),
            status_api_base: "http://127.0.0.1:8080".into(),
            build_targets: vec!["frontend".into(), "backend".into()],
            build_timeout: StageTimeout { wall: Duration::from_secs(15 * 60), ticks: 200 },
            deploy_timeout: StageTimeout { wall: Duration::from_secs(5 * 60), ticks: 67 },
            test_timeout: StageTimeout { wall: Duration::from_secs(10 * 60), ticks: 133 },
            strict_tests: false,
            templates: Templates::builtin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "result", rename_all = "kebab-case")]
pub enum ScheduleOutcome {
    Scheduled { run_id: String },
    Coalesced { run_id: String },
    CleanupDispatched,
}

#[derive(Default)]
struct RefSlot {
    worker_running: bool,
    pending: Option<String>,
    active: Option<(String, CancellationToken)>,
    cleanups: VecDeque<PipelineEvent>,
}

enum Job {
    Main(String, CancellationToken),
    Cleanup(PipelineEvent),
}

impl RefSlot {
    fn next_job(&mut self) -> Option<Job> {
        if let Some(ev) = self.cleanups.pop_front() {
            return Some(Job::Cleanup(ev));
        }
        let run_id = self.pending.take()?;
        let token = CancellationToken::new();
        self.active = Some((run_id.clone(), token.clone()));
        Some(Job::Main(run_id, token))
    }
}

#[derive(Default)]
struct State {
    runs: Vec<PipelineRun>,
    index: HashMap<String, usize>,
    envs: BTreeMap<String, EnvironmentRecord>,
    slots: HashMap<String, RefSlot>,
    counters: HashMap<String, u64>,
    cleanups: Vec<CleanupRecord>,
}

struct Inner {
    cfg: EngineConfig,
    backend: Arc<dyn Backend>,
    store: WorkspaceStore,
    source: Arc<dyn SourceProvider>,
    notifier: Arc<Notifier>,
    state: Mutex<State>,
    /// Queued intake events plus live workers; zero means quiescent.
    busy: watch::Sender<usize>,
}

#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

enum StageError {
    Failed(String),
    Aborted,
}

impl From<String> for StageError {
    fn from(s: String) -> Self {
        StageError::Failed(s)
    }
}

type StageResult = Result<Option<String>, StageError>;

/// Per-run scratch state shared between stages.
struct RunCtx {
    run_id: String,
    ref_key: RefKey,
    commit: Option<String>,
    checkout: Option<tempfile::TempDir>,
    workspace: Option<Workspace>,
    registered: Vec<String>,
    launched: Vec<String>,
    new_deploy: Option<String>,
    endpoint: Option<crate::backend::Endpoint>,
    results: Vec<(String, String)>,
}

impl RunCtx {
    fn tags(&self) -> Tags {
        Tags::from([(REF_TAG.to_owned(), self.ref_key.safe_id.clone()), (RUN_TAG.to_owned(), self.run_id.clone())])
    }

    fn definition(&self, kind: TemplateKind) -> String {
        definition_name(&self.ref_key.safe_id, kind)
    }

    fn workspace(&self) -> &Workspace {
        self.workspace.as_ref().expect("prepare stage ran")
    }
}

impl Engine {
    pub fn new(
        cfg: EngineConfig,
        backend: Arc<dyn Backend>,
        store: WorkspaceStore,
        source: Arc<dyn SourceProvider>,
        notifier: Arc<Notifier>,
    ) -> Self {
        let (busy, _) = watch::channel(0);
        Self {
            inner: Arc::new(Inner {
                cfg,
                backend,
                store,
                source,
                notifier,
                state: Mutex::new(State::default()),
                busy,
            }),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.cfg
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.inner.backend
    }

    pub fn store(&self) -> &WorkspaceStore {
        &self.inner.store
    }

    pub fn notifier(&self) -> &Arc<Notifier> {
        &self.inner.notifier
    }

    fn state(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn busy_add(&self, delta: isize) {
        self.inner.busy.send_modify(|n| *n = n.checked_add_signed(delta).expect("busy counter underflow"));
    }

    /// Spawns the serialized intake loop and returns its sending side.
    /// Must be called inside a Tokio runtime.
    pub fn intake(&self) -> EngineIntake {
        let (tx, mut rx) = mpsc::unbounded_channel::<PipelineEvent>();
        let engine = self.clone();
        tokio::spawn(async move {
            while let Some(ev) = rx.recv().await {
                engine.schedule_event(ev);
                engine.busy_add(-1);
            }
        });
        EngineIntake { engine: self.clone(), tx }
    }

    /// Routes one event. Must be called inside a Tokio runtime.
    pub fn schedule_event(&self, event: PipelineEvent) -> ScheduleOutcome {
        let safe = event.ref_key.safe_id.clone();
        let mut st = self.state();
        let outcome = if event.kind.is_cleanup() {
            let slot = st.slots.entry(safe.clone()).or_default();
            let pending = slot.pending.take();
            if let Some((_, token)) = &slot.active {
                token.cancel();
            }
            slot.cleanups.push_back(event);
            if let Some(run_id) = pending {
                abort_pending(&mut st, &run_id);
            }
            ScheduleOutcome::CleanupDispatched
        } else {
            let pending = st.slots.get(&safe).and_then(|s| s.pending.clone());
            match pending {
                Some(run_id) => {
                    let i = st.index[&run_id];
                    st.runs[i].trigger = event;
                    ScheduleOutcome::Coalesced { run_id }
                }
                None => {
                    let counter = st.counters.entry(safe.clone()).or_default();
                    *counter += 1;
                    let number = *counter;
                    let run_id = format!("{safe}-run-{number}");
                    let at = st.runs.len();
                    st.index.insert(run_id.clone(), at);
                    st.runs.push(PipelineRun::new(run_id.clone(), number, event));
                    st.slots.entry(safe.clone()).or_default().pending = Some(run_id.clone());
                    ScheduleOutcome::Scheduled { run_id }
                }
            }
        };
        let slot = st.slots.get_mut(&safe).expect("slot created above");
        if !slot.worker_running {
            if let Some(job) = slot.next_job() {
                slot.worker_running = true;
                self.busy_add(1);
                let engine = self.clone();
                tokio::spawn(async move { engine.worker(safe, job).await });
            }
        }
        outcome
    }

    async fn worker(self, safe: String, first: Job) {
        let mut job = first;
        loop {
            match job {
                Job::Main(run_id, token) => {
                    self.execute_run(&run_id, &token).await;
                    let mut st = self.state();
                    if let Some(slot) = st.slots.get_mut(&safe) {
                        slot.active = None;
                    }
                }
                Job::Cleanup(event) => {
                    self.run_cleanup_pipeline(&event).await;
                }
            }
            let mut st = self.state();
            let slot = st.slots.get_mut(&safe).expect("worker slot exists");
            match slot.next_job() {
                Some(next) => job = next,
                None => {
                    slot.worker_running = false;
                    self.busy_add(-1);
                    return;
                }
            }
        }
    }

    /// Resolves once no event is queued and no worker is running.
    pub async fn wait_idle(&self) {
        let mut rx = self.inner.busy.subscribe();
        let _ = rx.wait_for(|&n| n == 0).await;
    }

    pub fn is_idle(&self) -> bool {
        *self.inner.busy.borrow() == 0
    }

    pub fn runs(&self) -> Vec<PipelineRun> {
        self.state().runs.clone()
    }

    pub fn run(&self, run_id: &str) -> Option<PipelineRun> {
        let st = self.state();
        st.index.get(run_id).map(|&i| st.runs[i].clone())
    }

    pub fn runs_for(&self, ref_key: &RefKey) -> Vec<PipelineRun> {
        self.state().runs.iter().filter(|r| &r.ref_key == ref_key).cloned().collect()
    }

    pub fn environments(&self) -> Vec<EnvironmentRecord> {
        self.state().envs.values().cloned().collect()
    }

    pub fn environment(&self, ref_key: &RefKey) -> Option<EnvironmentRecord> {
        self.state().envs.get(&ref_key.safe_id).cloned()
    }

    pub fn cleanups(&self) -> Vec<CleanupRecord> {
        self.state().cleanups.clone()
    }

    pub fn cleanup(&self, delivery_id: &str) -> Option<CleanupRecord> {
        self.state().cleanups.iter().rev().find(|c| c.delivery_id == delivery_id).cloned()
    }

    pub fn notifications(&self) -> Vec<Notification> {
        self.inner.notifier.buffer().snapshot()
    }

    fn with_run<R>(&self, run_id: &str, f: impl FnOnce(&mut PipelineRun) -> R) -> R {
        let mut st = self.state();
        let i = st.index[run_id];
        f(&mut st.runs[i])
    }

    fn begin_stage(&self, run_id: &str, stage: Stage) {
        self.with_run(run_id, |r| {
            let rec = r.stage_mut(stage);
            rec.status = StageStatus::Running;
            rec.started_at = Some(Utc::now());
        });
    }

    fn end_stage(&self, run_id: &str, stage: Stage, status: StageStatus, detail: Option<String>) {
        self.with_run(run_id, |r| {
            let rec = r.stage_mut(stage);
            rec.status = status;
            rec.ended_at = Some(Utc::now());
            rec.detail = detail;
        });
    }

    async fn execute_run(&self, run_id: &str, token: &CancellationToken) {
        let trigger = self.with_run(run_id, |r| r.trigger.clone());
        let mut ctx = RunCtx {
            run_id: run_id.to_owned(),
            ref_key: trigger.ref_key.clone(),
            commit: trigger.commit_id.clone(),
            checkout: None,
            workspace: None,
            registered: Vec::new(),
            launched: Vec::new(),
            new_deploy: None,
            endpoint: None,
            results: Vec::new(),
        };
        tracing::info!(run = run_id, ref_name = %ctx.ref_key, "run started");
        let mut failure: Option<(Stage, String)> = None;
        let mut aborted = false;
        for stage in Stage::ORDER {
            if stage == Stage::Cleanup {
                break;
            }
            if failure.is_some() || aborted || token.is_cancelled() {
                aborted |= failure.is_none();
                self.end_stage(run_id, stage, StageStatus::Skipped, None);
                continue;
            }
            self.begin_stage(run_id, stage);
            match self.run_stage(stage, &mut ctx, token).await {
                Ok(detail) => self.end_stage(run_id, stage, StageStatus::Success, detail),
                Err(StageError::Failed(msg)) => {
                    tracing::warn!(run = run_id, stage = stage.as_str(), "stage failed: {msg}");
                    self.end_stage(run_id, stage, StageStatus::Failed, Some(msg.clone()));
                    failure = Some((stage, msg));
                }
                Err(StageError::Aborted) => {
                    self.end_stage(run_id, stage, StageStatus::Failed, Some("aborted by cleanup".into()));
                    aborted = true;
                }
            }
        }
        if failure.is_some() || aborted {
            self.stop_launched(&ctx);
        }

        self.begin_stage(run_id, Stage::Cleanup);
        let detail = self.cleanup_stage(&mut ctx);
        self.end_stage(run_id, Stage::Cleanup, StageStatus::Success, detail);

        let outcome = match (&failure, aborted) {
            (Some(_), _) => Outcome::Failed,
            (None, true) => Outcome::Aborted,
            (None, false) => Outcome::Success,
        };
        let run = self.with_run(run_id, |r| {
            r.outcome = outcome;
            r.error = failure.as_ref().map(|(s, m)| format!("{} failed: {m}", s.as_str()));
            r.clone()
        });
        tracing::info!(run = run_id, outcome = ?outcome, "run finished");
        if let Some((stage, msg)) = failure {
            self.notify(&run, stage, &msg).await;
        }
    }

    async fn notify(&self, run: &PipelineRun, stage: Stage, msg: &str) {
        let repository = run.trigger.repository.clone().unwrap_or_else(|| self.inner.cfg.repository.clone());
        let url = format!("{}/runs/{}", self.inner.cfg.status_api_base.trim_end_matches('/'), run.run_id);
        let n = Notification::error(
            repository,
            run.ref_key.name.clone(),
            url,
            run.run_number,
            format!("{} stage failed: {msg}", stage.as_str()),
        );
        if let Err(err) = self.inner.notifier.notify_failure(&n).await {
            tracing::error!("failure notification rejected: {err}");
        }
    }

    async fn run_stage(&self, stage: Stage, ctx: &mut RunCtx, token: &CancellationToken) -> StageResult {
        match stage {
            Stage::Checkout => self.stage_checkout(ctx),
            Stage::Prepare => self.stage_prepare(ctx),
            Stage::RegisterTaskdefs => self.stage_register(ctx),
            Stage::Build => self.stage_build(ctx, token).await,
            Stage::Deploy => self.stage_deploy(ctx, token).await,
            Stage::Test => self.stage_test(ctx, token).await,
            Stage::Report => self.stage_report(ctx),
            Stage::Cleanup => unreachable!("cleanup runs outside the stage loop"),
        }
    }

    fn stage_checkout(&self, ctx: &mut RunCtx) -> StageResult {
        let dir = tempfile::Builder::new()
            .prefix("branchflow-checkout-")
            .tempdir()
            .map_err(|e| format!("creating checkout directory: {e}"))?;
        self.inner
            .source
            .materialize(&ctx.ref_key, ctx.commit.as_deref(), dir.path())
            .map_err(|e| e.to_string())?;
        ctx.checkout = Some(dir);
        Ok(ctx.commit.clone().map(|c| format!("commit {c}")))
    }

    fn stage_prepare(&self, ctx: &mut RunCtx) -> StageResult {
        let store = &self.inner.store;
        let ws = store.create_workspace(&ctx.ref_key).map_err(|e| e.to_string())?;
        let origin = ctx.checkout.as_ref().expect("checkout ran").path();
        let files = store.stage_sources(&ws, origin).map_err(|e| e.to_string())?;
        ctx.checkout = None;
        let detail = format!("{files} files staged in {}", ws.root_path.display());
        ctx.workspace = Some(ws);
        Ok(Some(detail))
    }

    fn stage_register(&self, ctx: &mut RunCtx) -> StageResult {
        let root = ctx.workspace().root_path.clone();
        for kind in TemplateKind::ALL {
            let name = ctx.definition(kind);
            let def = render_template(kind, self.inner.cfg.templates.get(kind), &root, &name)
                .map_err(|e| e.to_string())?;
            self.inner.backend.register_task_definition(def).map_err(|e| e.to_string())?;
            ctx.registered.push(name);
        }
        Ok(Some(ctx.registered.join(", ")))
    }

    fn launch(&self, ctx: &mut RunCtx, mut req: LaunchRequest) -> Result<TaskHandle, String> {
        req.tags.extend(ctx.tags());
        req.env.insert(BRANCH_NAME_ENV.to_owned(), ctx.ref_key.name.clone());
        let handle = self.inner.backend.launch_task(req).map_err(|e| e.to_string())?;
        ctx.launched.push(handle.task_id.clone());
        Ok(handle)
    }

    /// Polls until `done` returns true, the stage budget runs out, or the
    /// run is cancelled.
    async fn poll_until(
        &self,
        timeout: &StageTimeout,
        what: &str,
        token: &CancellationToken,
        mut done: impl FnMut() -> Result<bool, String>,
    ) -> Result<(), StageError> {
        let backend = &self.inner.backend;
        let deadline = backend.clock().saturating_add(backend.budget(timeout));
        loop {
            if token.is_cancelled() {
                return Err(StageError::Aborted);
            }
            if done()? {
                return Ok(());
            }
            if backend.clock() >= deadline {
                return Err(StageError::Failed(format!("timed out waiting for {what}")));
            }
            tokio::select! {
                _ = backend.wait_poll() => {}
                _ = token.cancelled() => {}
            }
        }
    }

    fn poll_all(&self, ids: &[String]) -> Result<Vec<TaskHandle>, String> {
        ids.iter().map(|id| self.inner.backend.poll_task(id).map_err(|e| e.to_string())).collect()
    }

    async fn stage_build(&self, ctx: &mut RunCtx, token: &CancellationToken) -> StageResult {
        let def = ctx.definition(TemplateKind::Build);
        let mut ids = Vec::new();
        for target in &self.inner.cfg.build_targets {
            let mut req = LaunchRequest::new(def.clone(), Cluster::Build).env("BUILD_TARGET", target.clone());
            if let Some(c) = &ctx.commit {
                req = req.env("COMMIT_ID", c.clone());
            }
            ids.push(self.launch(ctx, req)?.task_id);
        }
        self.poll_until(&self.inner.cfg.build_timeout, "build tasks", token, || {
            Ok(self.poll_all(&ids)?.iter().all(TaskHandle::is_stopped))
        })
        .await?;
        let handles = self.poll_all(&ids)?;
        for (target, h) in self.inner.cfg.build_targets.iter().zip(&handles) {
            let log = self.inner.backend.fetch_logs(&h.task_id).unwrap_or_default();
            if h.exit_code != Some(0) {
                return Err(StageError::Failed(format!(
                    "build of {target} exited with {}:\n{}",
                    h.exit_code.unwrap_or(-1),
                    log_excerpt(&log)
                )));
            }
        }
        let ws = ctx.workspace();
        let artifacts = list_files(&ws.out(), &ws.root_path).map_err(|e| format!("listing {OUT_DIR}: {e}"))?;
        let detail = format!("{} targets built, {} artifacts", ids.len(), artifacts.len());
        self.with_run(&ctx.run_id, |r| r.artifact_paths = artifacts);
        Ok(Some(detail))
    }

    async fn stage_deploy(&self, ctx: &mut RunCtx, token: &CancellationToken) -> StageResult {
        let backend = &self.inner.backend;
        let safe = ctx.ref_key.safe_id.clone();
        let filter = Tags::from([(REF_TAG.to_owned(), safe.clone())]);
        let mut replaced = 0;
        for old in backend.list_tasks(Some(Cluster::Deploy), &filter) {
            if !old.is_stopped() {
                backend.stop_task(&old.task_id).map_err(|e| e.to_string())?;
                replaced += 1;
            }
        }
        self.state().envs.remove(&safe);

        let mut req = LaunchRequest::new(ctx.definition(TemplateKind::Deploy), Cluster::Deploy);
        if let Some(c) = &ctx.commit {
            req = req.env("COMMIT_ID", c.clone());
        }
        let id = self.launch(ctx, req)?.task_id;
        ctx.new_deploy = Some(id.clone());
        let mut served: Option<TaskHandle> = None;
        self.poll_until(&self.inner.cfg.deploy_timeout, "the deploy task to serve", token, || {
            let h = backend.poll_task(&id).map_err(|e| e.to_string())?;
            if h.is_stopped() {
                let log = backend.fetch_logs(&id).unwrap_or_default();
                return Err(format!(
                    "deploy task stopped before serving (exit {}):\n{}",
                    h.exit_code.unwrap_or(-1),
                    log_excerpt(&log)
                ));
            }
            let ready = h.status == TaskStatus::Running && h.endpoint.is_some();
            if ready {
                served = Some(h);
            }
            Ok(ready)
        })
        .await?;
        let task = served.expect("poll succeeded");
        let endpoint = task.endpoint.clone().expect("checked above");
        ctx.endpoint = Some(endpoint.clone());
        let record = EnvironmentRecord {
            ref_key: ctx.ref_key.clone(),
            task,
            endpoint: endpoint.clone(),
            created_by_run: ctx.run_id.clone(),
        };
        self.state().envs.insert(safe, record);
        self.with_run(&ctx.run_id, |r| r.environment = Some(id));
        Ok(Some(format!("serving at {endpoint}, replaced {replaced}")))
    }

    async fn stage_test(&self, ctx: &mut RunCtx, token: &CancellationToken) -> StageResult {
        let cases = discover_cases(&ctx.workspace().src().join(TESTS_DIR)).map_err(|e| format!("listing test cases: {e}"))?;
        let endpoint = ctx.endpoint.clone().expect("deploy stage ran");
        let def = ctx.definition(TemplateKind::Test);
        let mut ids = Vec::new();
        for (file, name) in &cases {
            let req = LaunchRequest::new(def.clone(), Cluster::Test)
                .tag(CASE_TAG, name.clone())
                .env("CASE_FILE", file.clone())
                .env("CASE_NAME", name.clone())
                .env("TARGET_ENDPOINT", format!("http://{endpoint}"))
                .env("TARGET_HOST", endpoint.host.clone())
                .env("TARGET_PORT", endpoint.port.to_string());
            ids.push(self.launch(ctx, req)?.task_id);
        }
        self.poll_until(&self.inner.cfg.test_timeout, "test tasks", token, || {
            Ok(self.poll_all(&ids)?.iter().all(TaskHandle::is_stopped))
        })
        .await?;
        let handles = self.poll_all(&ids)?;
        let results_dir = ctx.workspace().results();
        let mut synthesized = 0;
        for ((_, name), h) in cases.iter().zip(&handles) {
            let file = format!("{name}.xml");
            let xml = match std::fs::read_to_string(results_dir.join(&file)) {
                Ok(xml) => xml,
                Err(_) => {
                    synthesized += 1;
                    let log = self.inner.backend.fetch_logs(&h.task_id).unwrap_or_default();
                    missing_result_xml(name, h.exit_code, &log)
                }
            };
            ctx.results.push((file, xml));
        }
        Ok(Some(format!("{} cases run, {synthesized} without a result file", cases.len())))
    }

    fn stage_report(&self, ctx: &mut RunCtx) -> StageResult {
        let report: TestReport = aggregate(&ctx.run_id, &ctx.results);
        let t = report.totals;
        let all_passed = report.all_passed();
        self.with_run(&ctx.run_id, |r| r.report = Some(report));
        let detail = format!("run {} passed {} failed {} errored {}", t.run, t.passed, t.failed, t.errored);
        if self.inner.cfg.strict_tests && !all_passed {
            return Err(StageError::Failed(format!("strict mode: {detail}")));
        }
        Ok(Some(detail))
    }

    /// Stops every task this run launched that is still alive, including a
    /// deploy task it started, whose environment record is then dropped.
    fn stop_launched(&self, ctx: &RunCtx) {
        let backend = &self.inner.backend;
        for id in &ctx.launched {
            match backend.poll_task(id) {
                Ok(h) if !h.is_stopped() => {
                    if let Err(err) = backend.stop_task(id) {
                        tracing::warn!(task = %id, "stop failed: {err}");
                    }
                }
                _ => {}
            }
        }
        if let Some(id) = &ctx.new_deploy {
            let mut st = self.state();
            if st.envs.get(&ctx.ref_key.safe_id).is_some_and(|e| &e.task.task_id == id) {
                st.envs.remove(&ctx.ref_key.safe_id);
            }
        }
    }

    fn cleanup_stage(&self, ctx: &mut RunCtx) -> Option<String> {
        let backend = &self.inner.backend;
        // Ephemeral tasks never outlive the run, whatever path got us here.
        for id in &ctx.launched {
            if Some(id) == ctx.new_deploy.as_ref() {
                continue;
            }
            if backend.poll_task(id).is_ok_and(|h| !h.is_stopped()) {
                let _ = backend.stop_task(id);
            }
        }
        if ctx.workspace.take().is_some() {
            self.inner.store.destroy_workspace(&ctx.ref_key);
        }
        for name in ctx.registered.drain(..) {
            if let Err(err) = backend.deregister_task_definition(&name) {
                tracing::warn!(definition = %name, "deregistration failed: {err}");
            }
        }
        ctx.checkout = None;
        None
    }

    /// Stops every live task tagged with the ref and removes its workspace
    /// and environment record. Safe to repeat.
    pub async fn run_cleanup_pipeline(&self, event: &PipelineEvent) -> CleanupRecord {
        let backend = &self.inner.backend;
        let safe = &event.ref_key.safe_id;
        let filter = Tags::from([(REF_TAG.to_owned(), safe.clone())]);
        let mut stopped = 0;
        for task in backend.list_tasks(None, &filter) {
            if task.is_stopped() {
                continue;
            }
            match backend.stop_task(&task.task_id) {
                Ok(()) => stopped += 1,
                Err(err) => tracing::warn!(task = %task.task_id, "stop failed: {err}"),
            }
        }
        self.inner.store.destroy_workspace(&event.ref_key);
        for kind in TemplateKind::ALL {
            let _ = backend.deregister_task_definition(&definition_name(safe, kind));
        }
        let record = CleanupRecord {
            delivery_id: event.delivery_id.clone(),
            ref_key: event.ref_key.clone(),
            stopped_count: stopped,
            completed_at: Utc::now(),
        };
        let mut st = self.state();
        st.envs.remove(safe);
        st.cleanups.push(record.clone());
        tracing::info!(ref_name = %event.ref_key, stopped, "cleanup finished");
        record
    }
}

fn abort_pending(st: &mut State, run_id: &str) {
    let i = st.index[run_id];
    let run = &mut st.runs[i];
    for s in &mut run.stages {
        s.status = StageStatus::Skipped;
    }
    run.outcome = Outcome::Aborted;
    run.error = Some("cancelled by cleanup before starting".into());
}

/// Test cases: regular files directly under `dir`, skipping hidden and
/// underscore-prefixed helpers. Returns `(file name, case name)` pairs.
fn discover_cases(dir: &Path) -> std::io::Result<Vec<(String, String)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut cases = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let file = entry.file_name().to_string_lossy().into_owned();
        if file.starts_with('.') || file.starts_with('_') {
            continue;
        }
        let name = Path::new(&file).file_stem().map_or(file.clone(), |s| s.to_string_lossy().into_owned());
        cases.push((file, name));
    }
    cases.sort();
    Ok(cases)
}

fn list_files(dir: &Path, base: &Path) -> std::io::Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack: Vec<PathBuf> = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let entry = entry?;
            let ft = entry.file_type()?;
            if ft.is_dir() {
                stack.push(entry.path());
            } else if ft.is_file() {
                let rel = entry.path().strip_prefix(base).unwrap_or(&entry.path()).to_path_buf();
                out.push(rel.to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn log_excerpt(log: &str) -> String {
    let lines: Vec<&str> = log.lines().collect();
    lines[lines.len().saturating_sub(LOG_EXCERPT_LINES)..].join("\n")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn missing_result_xml(case: &str, exit_code: Option<i32>, log: &str) -> String {
    let msg = format!("no result file written (exit {})", exit_code.unwrap_or(-1));
    format!(
        "<testsuite name=\"{c}\"><testcase name=\"{c}\" time=\"0\"><error message=\"{m}\">{l}</error></testcase></testsuite>",
        c = xml_escape(case),
        m = xml_escape(&msg),
        l = xml_escape(&log_excerpt(log)),
    )
}

/// Sending side of the engine's serialized intake queue.
#[derive(Clone)]
pub struct EngineIntake {
    engine: Engine,
    tx: mpsc::UnboundedSender<PipelineEvent>,
}

impl EventSink for EngineIntake {
    fn enqueue(&self, event: PipelineEvent) {
        self.engine.busy_add(1);
        if self.tx.send(event).is_err() {
            self.engine.busy_add(-1);
            tracing::error!("engine intake closed; event dropped");
        }
    }
}
