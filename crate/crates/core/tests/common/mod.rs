#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use branchflow::app::template_programs;
use branchflow::backend::{Backend, Cluster, SimBackend, SimProgram, TaskStatus, Tags, REF_TAG};
use branchflow::engine::{DirectorySource, Engine, EngineConfig, SourceProvider};
use branchflow::gateway::{EventKind, Gateway, PipelineEvent};
use branchflow::notifier::{NotificationSink, Notifier};
use branchflow::scenario::Fixture;
use branchflow::workspace::{FsAudit, WorkspaceStore};

pub const TOKEN: &str = "s3cret-token";

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn sample_app() -> PathBuf {
    repo_root().join("sample-app")
}

pub fn fixture(name: &str) -> Fixture {
    Fixture::load(&repo_root().join("fixtures").join(name)).unwrap()
}

pub fn push(name: &str, commit: &str) -> PipelineEvent {
    PipelineEvent::synthetic(EventKind::BranchPushed, name, Some(commit))
}

pub fn delete(name: &str) -> PipelineEvent {
    PipelineEvent::synthetic(EventKind::BranchDeleted, name, None)
}

/// A source tree with `cases` trivial test files and nothing else.
pub fn source_with_cases(cases: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("tests")).unwrap();
    for i in 0..cases {
        std::fs::write(dir.path().join("tests").join(format!("case_{i}.py")), "pass\n").unwrap();
    }
    dir
}

pub struct RigOptions {
    pub cfg: EngineConfig,
    pub source: Option<Arc<dyn SourceProvider>>,
    pub programs: Vec<SimProgram>,
    /// `None` leaves the simulator clock stepped by hand.
    pub tick: Option<Duration>,
    pub sinks: Vec<Arc<dyn NotificationSink>>,
}

impl Default for RigOptions {
    fn default() -> Self {
        Self {
            cfg: EngineConfig { repository: "acme/poc-app".into(), ..EngineConfig::default() },
            source: None,
            programs: Vec::new(),
            tick: Some(Duration::from_millis(2)),
            sinks: Vec::new(),
        }
    }
}

/// An engine on the simulator with an audited workspace store.
pub struct SimRig {
    pub engine: Engine,
    pub sim: Arc<SimBackend>,
    pub audit: Arc<FsAudit>,
    pub storage: tempfile::TempDir,
}

impl SimRig {
    pub fn new(opts: RigOptions) -> Self {
        let storage = tempfile::tempdir().unwrap();
        let audit = Arc::new(FsAudit::default());
        let sim = Arc::new(SimBackend::new().with_audit(audit.clone()));
        for p in template_programs().into_iter().chain(opts.programs) {
            sim.program(p);
        }
        if let Some(period) = opts.tick {
            sim.start_clock(period);
        }
        let mut notifier = Notifier::new(None, 256);
        for s in opts.sinks {
            notifier.add_sink(s);
        }
        let source = opts.source.unwrap_or_else(|| Arc::new(DirectorySource::new(sample_app())));
        let store = WorkspaceStore::new(storage.path()).with_audit(audit.clone());
        let engine = Engine::new(opts.cfg, sim.clone(), store, source, Arc::new(notifier));
        Self { engine, sim, audit, storage }
    }

    pub fn default_rig() -> Self {
        Self::new(RigOptions::default())
    }

    pub fn gateway(&self) -> Gateway {
        Gateway::new(TOKEN, Arc::new(self.engine.intake()))
    }

    /// Steps a hand-driven clock until the engine is idle.
    pub async fn drive_until_idle(&self) {
        let start = Instant::now();
        while !self.engine.is_idle() {
            assert!(start.elapsed() < Duration::from_secs(30), "engine never went idle");
            self.sim.advance();
            tokio::time::sleep(Duration::from_millis(1)).await;
        }
    }

    pub async fn idle(&self) {
        tokio::time::timeout(Duration::from_secs(30), self.engine.wait_idle()).await.expect("engine went idle");
    }

    /// Waits (stepping the clock if needed) until `pred` holds.
    pub async fn until(&self, step: bool, mut pred: impl FnMut() -> bool) {
        let start = Instant::now();
        while !pred() {
            assert!(start.elapsed() < Duration::from_secs(30), "condition never held");
            if step {
                self.sim.advance();
            }
            tokio::time::sleep(Duration::from_millis(1)).await;
        }
    }

    pub fn tasks_for(&self, safe_id: &str) -> Vec<branchflow::backend::TaskHandle> {
        self.sim.list_tasks(None, &Tags::from([(REF_TAG.to_owned(), safe_id.to_owned())]))
    }

    pub fn running_deploys(&self, safe_id: &str) -> usize {
        self.sim
            .list_tasks(Some(Cluster::Deploy), &Tags::from([(REF_TAG.to_owned(), safe_id.to_owned())]))
            .iter()
            .filter(|t| t.status == TaskStatus::Running)
            .count()
    }
}
