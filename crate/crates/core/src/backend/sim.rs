//! Deterministic in-memory backend.
//!
//! Time is a tick counter that only moves when [`SimBackend::advance`] is
//! called, either by a test directly or by the optional clock thread. Every
//! launch picks a scripted [`SimBehavior`] by image reference.
//!
//! Lifecycle of a task launched at tick `t0` with duration `d`:
//! - batch task: pending at `t0`, running at `t0 + 1`, stopped at
//!   `t0 + max(d, 1)` with the scripted exit code; `writes` land then.
//! - serving task (exit code 0): running with an endpoint at `t0 + max(d, 1)`
//!   and stays up until stopped; `writes` land when it starts.
//! - serving task with a nonzero exit code: never serves, stops at
//!   `t0 + max(d, 1)`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Component, Path};
use std::sync::{Arc, Mutex, Weak};
use std::thread;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use super::{
    expand_vars, lock, task_env, Backend, BackendError, BackendKind, Cluster, DefinitionRegistry,
    Endpoint, LaunchRequest, SharedAudit, StageTimeout, TaskDefinition, TaskHandle,
    TaskStatus, Tags, Trace, TraceEntry, TraceKind, REF_TAG,
};
use crate::workspace::FsAudit;

pub const SIM_HOST: &str = "sim.internal";
const SIM_PORT_BASE: u16 = 20000;
/// Exit code recorded for tasks stopped from outside.
const STOPPED_EXIT_CODE: i32 = 137;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimWrite {
    pub path: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimBehavior {
    pub duration_ticks: u64,
    pub exit_code: i32,
    pub log_text: String,
    pub writes: Vec<SimWrite>,
    pub serves_endpoint: bool,
    /// Only applies to launches whose environment contains all of these.
    pub match_env: BTreeMap<String, String>,
}

impl Default for SimBehavior {
    fn default() -> Self {
        Self {
            duration_ticks: 1,
            exit_code: 0,
            log_text: String::new(),
            writes: Vec::new(),
            serves_endpoint: false,
            match_env: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimProgram {
    pub image: String,
    #[serde(flatten)]
    pub behavior: SimBehavior,
}

/// A file of scripted behaviors, as loaded from a scenario.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimProgramFile {
    #[serde(default)]
    pub programs: Vec<SimProgram>,
}

#[derive(Debug)]
struct SimTask {
    handle: TaskHandle,
    behavior: SimBehavior,
    env: BTreeMap<String, String>,
    mount: Option<std::path::PathBuf>,
    log: String,
}

#[derive(Debug, Default)]
struct SimState {
    tick: u64,
    next_task: u64,
    defs: DefinitionRegistry,
    programs: HashMap<String, Vec<SimBehavior>>,
    tasks: Vec<SimTask>,
    index: HashMap<String, usize>,
    trace: Trace,
    capacity: Option<usize>,
    peak_running: BTreeMap<Cluster, usize>,
}

impl SimState {
    fn behavior_for(&self, image: &str, cluster: Cluster, env: &BTreeMap<String, String>) -> SimBehavior {
        self.programs
            .get(image)
            .and_then(|list| {
                list.iter()
                    .rev()
                    .find(|b| b.match_env.iter().all(|(k, v)| env.get(k) == Some(v)))
            })
            .cloned()
            .unwrap_or_else(|| SimBehavior {
                serves_endpoint: cluster == Cluster::Deploy,
                ..SimBehavior::default()
            })
    }

    fn active(&self) -> usize {
        self.tasks.iter().filter(|t| !t.handle.is_stopped()).count()
    }

    fn update_peaks(&mut self) {
        for cluster in Cluster::ALL {
            let running = self
                .tasks
                .iter()
                .filter(|t| t.handle.cluster == cluster && t.handle.status == TaskStatus::Running)
                .count();
            let peak = self.peak_running.entry(cluster).or_default();
            *peak = (*peak).max(running);
        }
    }

    fn get(&self, task_id: &str) -> Result<&SimTask, BackendError> {
        self.index
            .get(task_id)
            .map(|&i| &self.tasks[i])
            .ok_or_else(|| BackendError::NotFound(task_id.to_owned()))
    }
}

pub struct SimBackend {
    state: Mutex<SimState>,
    ticks: watch::Sender<u64>,
    audit: SharedAudit,
    clock_running: Mutex<Option<Arc<()>>>,
}

impl Default for SimBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl SimBackend {
    pub fn new() -> Self {
        Self {
            state: Mutex::new(SimState::default()),
            ticks: watch::channel(0).0,
            audit: None,
            clock_running: Mutex::new(None),
        }
    }

    /// Records every file write made by scripted tasks.
    pub fn with_audit(mut self, audit: Arc<FsAudit>) -> Self {
        self.audit = Some(audit);
        self
    }

    /// Caps the number of non-stopped tasks.
    pub fn with_capacity(self, limit: usize) -> Self {
        lock(&self.state).capacity = Some(limit);
        self
    }

    pub fn program(&self, program: SimProgram) {
        lock(&self.state)
            .programs
            .entry(program.image)
            .or_default()
            .push(program.behavior);
    }

    pub fn load_programs(&self, file: &SimProgramFile) {
        for p in &file.programs {
            self.program(p.clone());
        }
    }

    pub fn tick(&self) -> u64 {
        lock(&self.state).tick
    }

    /// Moves the clock forward one tick and applies every due transition.
    pub fn advance(&self) {
        let tick = {
            let mut st = lock(&self.state);
            st.tick += 1;
            let tick = st.tick;
            let SimState { tasks, trace, .. } = &mut *st;
            for task in tasks.iter_mut() {
                step_task(task, tick, trace, self.audit.as_deref());
            }
            st.update_peaks();
            tick
        };
        self.ticks.send_replace(tick);
    }

    pub fn advance_by(&self, n: u64) {
        for _ in 0..n {
            self.advance();
        }
    }

    /// Starts a background thread advancing one tick per `period`. The thread
    /// exits when [`SimBackend::stop_clock`] is called or the backend drops.
    pub fn start_clock(self: &Arc<Self>, period: Duration) {
        let token = Arc::new(());
        *lock(&self.clock_running) = Some(token.clone());
        let weak: Weak<SimBackend> = Arc::downgrade(self);
        let alive = Arc::downgrade(&token);
        drop(token);
        thread::Builder::new()
            .name("sim-clock".into())
            .spawn(move || loop {
                thread::sleep(period);
                if alive.upgrade().is_none() {
                    break;
                }
                match weak.upgrade() {
                    Some(backend) => backend.advance(),
                    None => break,
                }
            })
            .expect("spawn sim clock");
    }

    pub fn stop_clock(&self) {
        lock(&self.clock_running).take();
    }

    /// Highest number of simultaneously running tasks seen in a cluster.
    pub fn peak_running(&self, cluster: Cluster) -> usize {
        lock(&self.state).peak_running.get(&cluster).copied().unwrap_or(0)
    }

    pub fn reset_peaks(&self) {
        lock(&self.state).peak_running.clear();
    }
}

fn step_task(task: &mut SimTask, tick: u64, trace: &mut Trace, audit: Option<&FsAudit>) {
    let h = &mut task.handle;
    if h.is_stopped() {
        return;
    }
    let due = h.launched_at + task.behavior.duration_ticks.max(1);
    let serving = task.behavior.serves_endpoint && task.behavior.exit_code == 0;

    if serving {
        if h.status == TaskStatus::Pending && tick >= due {
            h.status = TaskStatus::Running;
            h.started_at = Some(tick);
            h.endpoint = Some(Endpoint {
                host: SIM_HOST.to_owned(),
                port: sim_port(&h.task_id),
            });
            trace.push(tick, h, TraceKind::Running);
            finish_output(task, audit);
        }
        return;
    }

    if task.behavior.serves_endpoint {
        // crashing server: never reaches running
        if tick >= due {
            h.status = TaskStatus::Stopped;
            h.exit_code = Some(task.behavior.exit_code);
            h.stopped_at = Some(tick);
            trace.push(tick, h, TraceKind::Stopped);
            finish_output(task, audit);
        }
        return;
    }

    if h.status == TaskStatus::Pending && tick > h.launched_at {
        h.status = TaskStatus::Running;
        h.started_at = Some(tick);
        trace.push(tick, h, TraceKind::Running);
    }
    if h.status == TaskStatus::Running && tick >= due {
        h.status = TaskStatus::Stopped;
        h.exit_code = Some(task.behavior.exit_code);
        h.stopped_at = Some(tick);
        trace.push(tick, h, TraceKind::Stopped);
        finish_output(task, audit);
    }
}

fn sim_port(task_id: &str) -> u16 {
    let n: u16 = task_id
        .rsplit('-')
        .next()
        .and_then(|s| s.parse::<u64>().ok())
        .map(|n| (n % 40000) as u16)
        .unwrap_or(0);
    SIM_PORT_BASE + n
}

/// Appends scripted log output and lands scripted writes in the mount.
fn finish_output(task: &mut SimTask, audit: Option<&FsAudit>) {
    if !task.behavior.log_text.is_empty() {
        task.log.push_str(&expand_vars(&task.behavior.log_text, &task.env));
        task.log.push('\n');
    }
    for write in &task.behavior.writes {
        let rel = expand_vars(&write.path, &task.env);
        let Some(mount) = &task.mount else {
            task.log.push_str(&format!("sim: no volume mounted, dropped write to {rel}\n"));
            continue;
        };
        if !is_contained(Path::new(&rel)) {
            task.log.push_str(&format!("sim: refused write outside mount: {rel}\n"));
            continue;
        }
        let target = mount.join(&rel);
        let content = expand_vars(&write.content, &task.env);
        let result = target
            .parent()
            .map_or(Ok(()), std::fs::create_dir_all)
            .and_then(|_| std::fs::write(&target, content));
        match result {
            Ok(()) => {
                if let Some(audit) = audit {
                    let owner = task.handle.tags.get(REF_TAG).cloned().unwrap_or_default();
                    audit.record(&owner, &target);
                }
            }
            Err(err) => task.log.push_str(&format!("sim: write {rel} failed: {err}\n")),
        }
    }
}

fn is_contained(rel: &Path) -> bool {
    rel.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

#[async_trait]
impl Backend for SimBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Sim
    }

    fn register_task_definition(&self, def: TaskDefinition) -> Result<String, BackendError> {
        lock(&self.state).defs.register(def)
    }

    fn deregister_task_definition(&self, name: &str) -> Result<(), BackendError> {
        lock(&self.state).defs.deregister(name)
    }

    fn task_definition(&self, name: &str) -> Option<TaskDefinition> {
        lock(&self.state).defs.get(name).cloned()
    }

    fn task_definitions(&self) -> Vec<String> {
        lock(&self.state).defs.names()
    }

    fn launch_task(&self, req: LaunchRequest) -> Result<TaskHandle, BackendError> {
        let mut st = lock(&self.state);
        let def = st
            .defs
            .get(&req.definition)
            .cloned()
            .ok_or_else(|| BackendError::UnknownDefinition(req.definition.clone()))?;
        if let Some(limit) = st.capacity {
            if st.active() >= limit {
                return Err(BackendError::CapacityExceeded { limit });
            }
        }
        st.next_task += 1;
        let env = task_env(&def, &req);
        let behavior = st.behavior_for(&def.image, req.cluster, &env);
        let handle = TaskHandle {
            task_id: format!("sim-task-{:06}", st.next_task),
            cluster: req.cluster,
            definition: def.name.clone(),
            status: TaskStatus::Pending,
            exit_code: None,
            endpoint: None,
            tags: req.tags,
            launched_at: st.tick,
            started_at: None,
            stopped_at: None,
        };
        let tick = st.tick;
        st.trace.push(tick, &handle, TraceKind::Launched);
        let idx = st.tasks.len();
        st.index.insert(handle.task_id.clone(), idx);
        st.tasks.push(SimTask { handle: handle.clone(), behavior, env, mount: def.mount_dir(), log: String::new() });
        Ok(handle)
    }

    fn poll_task(&self, task_id: &str) -> Result<TaskHandle, BackendError> {
        lock(&self.state).get(task_id).map(|t| t.handle.clone())
    }

    fn stop_task(&self, task_id: &str) -> Result<(), BackendError> {
        let mut st = lock(&self.state);
        let idx = *st.index.get(task_id).ok_or_else(|| BackendError::NotFound(task_id.to_owned()))?;
        let tick = st.tick;
        let SimState { tasks, trace, .. } = &mut *st;
        let h = &mut tasks[idx].handle;
        if h.is_stopped() {
            return Ok(());
        }
        trace.push(tick, h, TraceKind::StopRequested);
        h.status = TaskStatus::Stopped;
        h.exit_code = Some(STOPPED_EXIT_CODE);
        h.stopped_at = Some(tick);
        h.endpoint = None;
        trace.push(tick, h, TraceKind::Stopped);
        Ok(())
    }

    fn list_tasks(&self, cluster: Option<Cluster>, tags: &Tags) -> Vec<TaskHandle> {
        lock(&self.state)
            .tasks
            .iter()
            .filter(|t| t.handle.matches(cluster, tags))
            .map(|t| t.handle.clone())
            .collect()
    }

    fn fetch_logs(&self, task_id: &str) -> Result<String, BackendError> {
        lock(&self.state).get(task_id).map(|t| t.log.clone())
    }

    fn sim_program(&self, program: SimProgram) -> Result<(), BackendError> {
        self.program(program);
        Ok(())
    }

    fn clock(&self) -> u64 {
        self.tick()
    }

    fn budget(&self, timeout: &StageTimeout) -> u64 {
        timeout.ticks
    }

    async fn wait_poll(&self) {
        let mut rx = self.ticks.subscribe();
        let _ = rx.changed().await;
    }

    fn trace(&self) -> Vec<TraceEntry> {
        lock(&self.state).trace.entries()
    }
}
