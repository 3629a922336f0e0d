//! Serverless task backends.
//!
//! A backend owns a registry of task definitions and a set of tasks launched
//! from them into one of three fixed clusters. Tasks carry free-form tags;
//! the engine tags everything it launches with `ref=<safe-id>` and finds
//! tasks again by filtering on that tag.

mod local;
mod sim;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

pub use local::{default_image_table, ImageSpec, LocalBackend, WORKSPACE_MARKER};
pub use sim::{SimBackend, SimBehavior, SimProgram, SimProgramFile, SimWrite, SIM_HOST};

use crate::workspace::FsAudit;

pub type Tags = BTreeMap<String, String>;

/// Tag key every engine-launched task carries.
pub const REF_TAG: &str = "ref";
pub const RUN_TAG: &str = "run";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cluster {
    Build,
    Deploy,
    Test,
}

impl Cluster {
    pub const ALL: [Cluster; 3] = [Cluster::Build, Cluster::Deploy, Cluster::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Cluster::Build => "build",
            Cluster::Deploy => "deploy",
            Cluster::Test => "test",
        }
    }
}

impl fmt::Display for Cluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortMapping {
    pub container_port: u16,
    #[serde(default = "default_protocol")]
    pub protocol: String,
}

fn default_protocol() -> String {
    "tcp".to_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeMount {
    pub volume: String,
    pub mount_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDefinition {
    pub name: String,
    pub image: String,
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub port_mappings: Vec<PortMapping>,
    #[serde(default)]
    pub volume_mounts: Vec<VolumeMount>,
    pub cpu_units: u32,
    pub memory_mb: u32,
}

impl TaskDefinition {
    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |why: &str| Err(BackendError::InvalidDefinition(why.to_owned()));
        if self.name.trim().is_empty() {
            return invalid("name must not be empty");
        }
        if self.image.trim().is_empty() {
            return invalid("image must not be empty");
        }
        if self.cpu_units == 0 || self.memory_mb == 0 {
            return invalid("cpu_units and memory_mb must be positive");
        }
        if self.volume_mounts.iter().any(|m| m.mount_path.is_empty()) {
            return invalid("volume mount path must not be empty");
        }
        Ok(())
    }

    /// Host directory backing the first volume mount.
    pub fn mount_dir(&self) -> Option<PathBuf> {
        self.volume_mounts.first().map(|m| PathBuf::from(&m.mount_path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Running,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

/// Snapshot of one task. Clock fields are in backend clock units
/// (ticks for the simulator, milliseconds for the local backend).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHandle {
    pub task_id: String,
    pub cluster: Cluster,
    pub definition: String,
    pub status: TaskStatus,
    pub exit_code: Option<i32>,
    pub endpoint: Option<Endpoint>,
    pub tags: Tags,
    pub launched_at: u64,
    pub started_at: Option<u64>,
    pub stopped_at: Option<u64>,
}

impl TaskHandle {
    pub fn is_stopped(&self) -> bool {
        self.status == TaskStatus::Stopped
    }

    pub fn matches(&self, cluster: Option<Cluster>, tags: &Tags) -> bool {
        cluster.is_none_or(|c| c == self.cluster)
            && tags.iter().all(|(k, v)| self.tags.get(k) == Some(v))
    }

    /// Checks the status/exit-code/endpoint consistency rules.
    pub fn is_consistent(&self) -> bool {
        let exit_ok = self.exit_code.is_some() == self.is_stopped();
        let endpoint_ok = self.endpoint.is_none()
            || (self.cluster == Cluster::Deploy && self.started_at.is_some());
        let clock_ok = match (self.started_at, self.stopped_at) {
            (Some(s), Some(e)) => s <= e && self.launched_at <= s,
            (Some(s), None) => self.launched_at <= s,
            (None, Some(e)) => self.launched_at <= e,
            (None, None) => true,
        };
        exit_ok && endpoint_ok && clock_ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchRequest {
    pub definition: String,
    pub cluster: Cluster,
    #[serde(default)]
    pub tags: Tags,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

impl LaunchRequest {
    pub fn new(definition: impl Into<String>, cluster: Cluster) -> Self {
        Self { definition: definition.into(), cluster, tags: Tags::new(), env: BTreeMap::new() }
    }

    pub fn tag(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.tags.insert(k.into(), v.into());
        self
    }

    pub fn env(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.env.insert(k.into(), v.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("invalid task definition: {0}")]
    InvalidDefinition(String),
    #[error("unknown task definition `{0}`")]
    UnknownDefinition(String),
    #[error("task `{0}` not found")]
    NotFound(String),
    #[error("capacity exceeded: {limit} tasks already active")]
    CapacityExceeded { limit: usize },
    #[error("operation not supported by the {0} backend")]
    Unsupported(&'static str),
    #[error("launch failed: {0}")]
    Launch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Launched,
    Running,
    StopRequested,
    Stopped,
}

/// One entry in a backend's ordered event trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: u64,
    pub at: u64,
    pub task_id: String,
    pub cluster: Cluster,
    pub kind: TraceKind,
    pub tags: Tags,
}

/// Per-stage timeout with a wall-clock and a simulator-tick form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimeout {
    pub wall: Duration,
    pub ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Sim,
    Local,
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn register_task_definition(&self, def: TaskDefinition) -> Result<String, BackendError>;
    fn deregister_task_definition(&self, name: &str) -> Result<(), BackendError>;
    fn task_definition(&self, name: &str) -> Option<TaskDefinition>;
    fn task_definitions(&self) -> Vec<String>;

    fn launch_task(&self, req: LaunchRequest) -> Result<TaskHandle, BackendError>;
    fn poll_task(&self, task_id: &str) -> Result<TaskHandle, BackendError>;
    fn stop_task(&self, task_id: &str) -> Result<(), BackendError>;
    fn list_tasks(&self, cluster: Option<Cluster>, tags: &Tags) -> Vec<TaskHandle>;
    fn fetch_logs(&self, task_id: &str) -> Result<String, BackendError>;

    fn sim_program(&self, _program: SimProgram) -> Result<(), BackendError> {
        Err(BackendError::Unsupported(match self.kind() {
            BackendKind::Sim => "sim",
            BackendKind::Local => "local",
        }))
    }

    /// Current backend clock in its native unit.
    fn clock(&self) -> u64;
    /// A stage timeout expressed in clock units.
    fn budget(&self, timeout: &StageTimeout) -> u64;
    /// Waits one poll interval.
    async fn wait_poll(&self);

    fn trace(&self) -> Vec<TraceEntry>;
}

/// Expands `${NAME}` references from `env`; unknown names expand to "".
pub fn expand_vars(text: &str, env: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find('}') {
            Some(end) => {
                if let Some(v) = env.get(&after[..end]) {
                    out.push_str(v);
                }
                rest = &after[end + 1..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Name→definition map with replace-on-register semantics.
#[derive(Debug, Default)]
pub(crate) struct DefinitionRegistry {
    defs: BTreeMap<String, TaskDefinition>,
}

impl DefinitionRegistry {
    pub fn register(&mut self, def: TaskDefinition) -> Result<String, BackendError> {
        def.validate()?;
        let name = def.name.clone();
        self.defs.insert(name.clone(), def);
        Ok(name)
    }

    pub fn deregister(&mut self, name: &str) -> Result<(), BackendError> {
        self.defs
            .remove(name)
            .map(|_| ())
            .ok_or_else(|| BackendError::UnknownDefinition(name.to_owned()))
    }

    pub fn get(&self, name: &str) -> Option<&TaskDefinition> {
        self.defs.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.defs.keys().cloned().collect()
    }
}

/// Ordered trace recorder shared by both backends.
#[derive(Debug, Default)]
pub(crate) struct Trace {
    entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn push(&mut self, at: u64, handle: &TaskHandle, kind: TraceKind) {
        let seq = self.entries.len() as u64;
        self.entries.push(TraceEntry {
            seq,
            at,
            task_id: handle.task_id.clone(),
            cluster: handle.cluster,
            kind,
            tags: handle.tags.clone(),
        });
    }

    pub fn entries(&self) -> Vec<TraceEntry> {
        self.entries.clone()
    }
}

pub(crate) fn task_env(def: &TaskDefinition, req: &LaunchRequest) -> BTreeMap<String, String> {
    let mut env = def.env.clone();
    if let Some(mount) = def.volume_mounts.first() {
        env.insert("WORKSPACE".into(), mount.mount_path.clone());
    }
    env.extend(req.env.iter().map(|(k, v)| (k.clone(), v.clone())));
    env
}

pub(crate) type SharedAudit = Option<Arc<FsAudit>>;

pub(crate) fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn def(name: &str, image: &str) -> TaskDefinition {
        TaskDefinition {
            name: name.into(),
            image: image.into(),
            command: vec![],
            env: BTreeMap::new(),
            port_mappings: vec![],
            volume_mounts: vec![],
            cpu_units: 256,
            memory_mb: 512,
        }
    }

    #[test]
    fn expand() {
        let env = BTreeMap::from([("A".to_owned(), "x".to_owned()), ("B".to_owned(), "yy".to_owned())]);
        assert_eq!(expand_vars("results/${A}.xml", &env), "results/x.xml");
        assert_eq!(expand_vars("${A}${B}-${C}", &env), "xyy-");
        assert_eq!(expand_vars("no vars", &env), "no vars");
        assert_eq!(expand_vars("dangling ${A", &env), "dangling ${A");
    }

    #[test]
    fn registry_replaces_and_validates() {
        let mut reg = DefinitionRegistry::default();
        reg.register(def("build", "img:1")).unwrap();
        reg.register(def("build", "img:2")).unwrap();
        assert_eq!(reg.get("build").unwrap().image, "img:2");
        assert!(matches!(reg.register(def("", "img")), Err(BackendError::InvalidDefinition(_))));
        assert!(matches!(reg.deregister("nope"), Err(BackendError::UnknownDefinition(_))));
    }

    /// Random register/deregister sequences against a plain map reference.
    #[test]
    fn registry_matches_map_reference() {
        use proptest::prelude::*;
        proptest!(|(ops in proptest::collection::vec((0u8..3, 0usize..4, 0u8..5), 0..60))| {
            let mut reg = DefinitionRegistry::default();
            let mut reference: BTreeMap<String, String> = BTreeMap::new();
            for (op, n, img) in ops {
                let name = format!("d{n}");
                let image = format!("img:{img}");
                match op {
                    0 | 1 => {
                        reg.register(def(&name, &image)).unwrap();
                        reference.insert(name, image);
                    }
                    _ => {
                        prop_assert_eq!(reg.deregister(&name).is_ok(), reference.remove(&name).is_some());
                    }
                }
            }
            prop_assert_eq!(reg.names(), reference.keys().cloned().collect::<Vec<_>>());
            for (k, v) in &reference {
                prop_assert_eq!(&reg.get(k).unwrap().image, v);
            }
        });
    }
}
