//! Backend that runs tasks as local child processes.
//!
//! Container images are not pulled. An image table maps each image reference
//! to an executable plus leading arguments; the task definition's command is
//! appended and the working directory is derived from the volume mount.
//! Deploy-cluster tasks get a fresh loopback port in `PORT` and count as
//! running once that port accepts connections.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    expand_vars, lock, task_env, Backend, BackendError, BackendKind, Cluster, DefinitionRegistry,
    Endpoint, LaunchRequest, StageTimeout, TaskDefinition, TaskHandle, TaskStatus, Tags, Trace,
    TraceEntry, TraceKind,
};

pub const WORKSPACE_MARKER: &str = "{{WORKSPACE}}";
const LOOPBACK: &str = "127.0.0.1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub executable: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Working directory; `{{WORKSPACE}}` expands to the task's mount path.
    #[serde(default = "default_working_dir")]
    pub working_dir_template: String,
}

fn default_working_dir() -> String {
    WORKSPACE_MARKER.to_owned()
}

struct LocalTask {
    handle: TaskHandle,
    child: Option<Child>,
    port: Option<u16>,
    log: Arc<Mutex<String>>,
    readers: Vec<JoinHandle<()>>,
}

#[derive(Default)]
struct LocalState {
    next_task: u64,
    defs: DefinitionRegistry,
    tasks: Vec<LocalTask>,
    index: HashMap<String, usize>,
    trace: Trace,
}

pub struct LocalBackend {
    images: HashMap<String, ImageSpec>,
    poll_interval: Duration,
    epoch: Instant,
    state: Mutex<LocalState>,
}

impl LocalBackend {
    pub fn new(images: HashMap<String, ImageSpec>, poll_interval: Duration) -> Self {
        Self { images, poll_interval, epoch: Instant::now(), state: Mutex::new(LocalState::default()) }
    }

    fn now(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    /// Stops every task that is still alive. Returns how many were stopped.
    pub fn stop_all(&self) -> usize {
        let ids: Vec<String> = self
            .list_tasks(None, &Tags::new())
            .into_iter()
            .filter(|t| !t.is_stopped())
            .map(|t| t.task_id)
            .collect();
        for id in &ids {
            let _ = self.stop_task(id);
        }
        ids.len()
    }

    /// Number of tasks whose process has not been reaped.
    pub fn live_processes(&self) -> usize {
        lock(&self.state).tasks.iter().filter(|t| t.child.is_some()).count()
    }

    fn refresh(&self, task: &mut LocalTask, trace: &mut Trace) {
        let now = self.now();
        let Some(child) = task.child.as_mut() else { return };
        match child.try_wait() {
            Ok(Some(status)) => {
                task.child = None;
                for r in task.readers.drain(..) {
                    let _ = r.join();
                }
                let h = &mut task.handle;
                h.status = TaskStatus::Stopped;
                h.exit_code = Some(exit_code(status));
                h.stopped_at = Some(now);
                h.endpoint = None;
                trace.push(now, h, TraceKind::Stopped);
            }
            Ok(None) => {
                let h = &mut task.handle;
                if h.status == TaskStatus::Pending {
                    if let Some(port) = task.port {
                        let addr: SocketAddr = format!("{LOOPBACK}:{port}").parse().expect("loopback addr");
                        if TcpStream::connect_timeout(&addr, Duration::from_millis(50)).is_ok() {
                            h.status = TaskStatus::Running;
                            h.started_at = Some(now);
                            h.endpoint = Some(Endpoint { host: LOOPBACK.to_owned(), port });
                            trace.push(now, h, TraceKind::Running);
                        }
                    }
                }
            }
            Err(err) => tracing::warn!(task = %task.handle.task_id, "try_wait failed: {err}"),
        }
    }

    fn refresh_all(&self, st: &mut LocalState) {
        let LocalState { tasks, trace, .. } = st;
        for task in tasks.iter_mut() {
            self.refresh(task, trace);
        }
    }
}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    status.code().unwrap_or(-1)
}

fn free_port() -> std::io::Result<u16> {
    let listener = TcpListener::bind((LOOPBACK, 0))?;
    Ok(listener.local_addr()?.port())
}

fn spawn_reader<R: Read + Send + 'static>(mut src: R, log: Arc<Mutex<String>>) -> JoinHandle<()> {
    std::thread::spawn(move || {
        let mut buf = [0u8; 4096];
        loop {
            match src.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => lock(&log).push_str(&String::from_utf8_lossy(&buf[..n])),
            }
        }
    })
}

impl Drop for LocalBackend {
    fn drop(&mut self) {
        let st = self.state.get_mut().unwrap_or_else(|e| e.into_inner());
        for task in &mut st.tasks {
            if let Some(mut child) = task.child.take() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

#[async_trait]
impl Backend for LocalBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Local
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
        let image = self
            .images
            .get(&def.image)
            .ok_or_else(|| BackendError::Launch(format!("image `{}` not in the image table", def.image)))?;

        let mut env = task_env(&def, &req);
        let mut port = None;
        if req.cluster == Cluster::Deploy {
            let p = free_port().map_err(|e| BackendError::Launch(format!("port allocation: {e}")))?;
            env.insert("PORT".into(), p.to_string());
            port = Some(p);
        }
        let mount = def.volume_mounts.first().map(|m| m.mount_path.clone()).unwrap_or_default();
        let workdir = image.working_dir_template.replace(WORKSPACE_MARKER, &mount);
        let args: Vec<String> = image
            .args
            .iter()
            .chain(def.command.iter())
            .map(|a| expand_vars(&a.replace(WORKSPACE_MARKER, &mount), &env))
            .collect();

        let mut cmd = Command::new(&image.executable);
        cmd.args(&args)
            .envs(&env)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if !workdir.is_empty() {
            cmd.current_dir(&workdir);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| BackendError::Launch(format!("{}: {e}", image.executable)))?;

        let log = Arc::new(Mutex::new(String::new()));
        let mut readers = Vec::new();
        if let Some(out) = child.stdout.take() {
            readers.push(spawn_reader(out, log.clone()));
        }
        if let Some(err) = child.stderr.take() {
            readers.push(spawn_reader(err, log.clone()));
        }

        st.next_task += 1;
        let now = self.now();
        let is_deploy = req.cluster == Cluster::Deploy;
        let handle = TaskHandle {
            task_id: format!("local-task-{:06}", st.next_task),
            cluster: req.cluster,
            definition: def.name.clone(),
            status: if is_deploy { TaskStatus::Pending } else { TaskStatus::Running },
            exit_code: None,
            endpoint: None,
            tags: req.tags,
            launched_at: now,
            started_at: (!is_deploy).then_some(now),
            stopped_at: None,
        };
        st.trace.push(now, &handle, TraceKind::Launched);
        if !is_deploy {
            st.trace.push(now, &handle, TraceKind::Running);
        }
        let idx = st.tasks.len();
        st.index.insert(handle.task_id.clone(), idx);
        st.tasks.push(LocalTask { handle: handle.clone(), child: Some(child), port, log, readers });
        tracing::debug!(task = %handle.task_id, ?args, "launched local task");
        Ok(handle)
    }

    fn poll_task(&self, task_id: &str) -> Result<TaskHandle, BackendError> {
        let mut st = lock(&self.state);
        let idx = *st.index.get(task_id).ok_or_else(|| BackendError::NotFound(task_id.to_owned()))?;
        let LocalState { tasks, trace, .. } = &mut *st;
        self.refresh(&mut tasks[idx], trace);
        Ok(tasks[idx].handle.clone())
    }

    fn stop_task(&self, task_id: &str) -> Result<(), BackendError> {
        let mut st = lock(&self.state);
        let idx = *st.index.get(task_id).ok_or_else(|| BackendError::NotFound(task_id.to_owned()))?;
        let now = self.now();
        let LocalState { tasks, trace, .. } = &mut *st;
        let task = &mut tasks[idx];
        let Some(mut child) = task.child.take() else {
            return Ok(());
        };
        trace.push(now, &task.handle, TraceKind::StopRequested);
        let _ = child.kill();
        let status = child.wait();
        for r in task.readers.drain(..) {
            let _ = r.join();
        }
        let h = &mut task.handle;
        h.status = TaskStatus::Stopped;
        h.exit_code = Some(status.map(exit_code).unwrap_or(-1));
        h.stopped_at = Some(self.now());
        h.endpoint = None;
        trace.push(self.now(), h, TraceKind::Stopped);
        Ok(())
    }

    fn list_tasks(&self, cluster: Option<Cluster>, tags: &Tags) -> Vec<TaskHandle> {
        let mut st = lock(&self.state);
        self.refresh_all(&mut st);
        st.tasks
            .iter()
            .filter(|t| t.handle.matches(cluster, tags))
            .map(|t| t.handle.clone())
            .collect()
    }

    fn fetch_logs(&self, task_id: &str) -> Result<String, BackendError> {
        let mut st = lock(&self.state);
        let idx = *st.index.get(task_id).ok_or_else(|| BackendError::NotFound(task_id.to_owned()))?;
        let LocalState { tasks, trace, .. } = &mut *st;
        self.refresh(&mut tasks[idx], trace);
        let log = lock(&tasks[idx].log).clone();
        Ok(log)
    }

    fn clock(&self) -> u64 {
        self.now()
    }

    fn budget(&self, timeout: &StageTimeout) -> u64 {
        timeout.wall.as_millis() as u64
    }

    async fn wait_poll(&self) {
        tokio::time::sleep(self.poll_interval).await;
    }

    fn trace(&self) -> Vec<TraceEntry> {
        lock(&self.state).trace.entries()
    }
}

/// Image table used when the configuration does not provide one. The
/// three images run Python scripts shipped with the sample application.
pub fn default_image_table() -> HashMap<String, ImageSpec> {
    let python = ImageSpec {
        executable: "python3".into(),
        args: vec!["-u".into()],
        working_dir_template: WORKSPACE_MARKER.into(),
    };
    BTreeMap::from([
        ("branchflow/build-env:1".to_owned(), python.clone()),
        ("branchflow/deploy-env:1".to_owned(), python.clone()),
        ("branchflow/test-env:1".to_owned(), python),
    ])
    .into_iter()
    .collect()
}
