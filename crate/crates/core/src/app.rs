//! Wires gateway, engine, backend and portal together from a [`Config`].

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use tokio::net::TcpListener;

use crate::backend::{
    default_image_table, Backend, BackendKind, LocalBackend, SimBackend, SimBehavior, SimProgram, SimWrite,
};
use crate::config::{Config, ConfigError};
use crate::engine::{DirectorySource, Engine, SourceProvider};
use crate::gateway::Gateway;
use crate::notifier::Notifier;
use crate::portal;
use crate::workspace::{FsAudit, WorkspaceStore};

pub const BUILD_IMAGE: &str = "branchflow/build-env:1";
pub const DEPLOY_IMAGE: &str = "branchflow/deploy-env:1";
pub const TEST_IMAGE: &str = "branchflow/test-env:1";

const PASSING_RESULT: &str = r#"<testsuite name="${CASE_NAME}"><testcase name="${CASE_NAME}" time="0.1"/></testsuite>"#;

/// Simulator behaviors for the three shipped template images: builds take
/// 3 ticks and drop one artifact per target, the server answers after
/// 2 ticks, and each test case passes after 3 ticks.
pub fn template_programs() -> Vec<SimProgram> {
    vec![
        SimProgram {
            image: BUILD_IMAGE.into(),
            behavior: SimBehavior {
                duration_ticks: 3,
                log_text: "BUILD OK".into(),
                writes: vec![SimWrite {
                    path: "out/${BUILD_TARGET}.bin".into(),
                    content: "${BUILD_TARGET} built from ${COMMIT_ID}\n".into(),
                }],
                ..SimBehavior::default()
            },
        },
        SimProgram {
            image: DEPLOY_IMAGE.into(),
            behavior: SimBehavior {
                duration_ticks: 2,
                log_text: "serving".into(),
                serves_endpoint: true,
                ..SimBehavior::default()
            },
        },
        SimProgram {
            image: TEST_IMAGE.into(),
            behavior: SimBehavior {
                duration_ticks: 3,
                writes: vec![SimWrite { path: "results/${CASE_NAME}.xml".into(), content: PASSING_RESULT.into() }],
                ..SimBehavior::default()
            },
        },
    ]
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("storage root {path}: {source}")]
    Storage { path: String, source: std::io::Error },
    #[error("binding {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server: {0}")]
    Serve(std::io::Error),
}

/// A fully wired service instance.
pub struct App {
    pub engine: Engine,
    pub gateway: Arc<Gateway>,
    pub sim: Option<Arc<SimBackend>>,
    pub local: Option<Arc<LocalBackend>>,
    pub audit: Arc<FsAudit>,
}

impl App {
    /// Builds the service using the configured source directory. Must be
    /// called inside a Tokio runtime; a sim backend starts its clock here.
    pub fn build(cfg: &Config) -> Result<Self, AppError> {
        Self::build_with_source(cfg, Arc::new(DirectorySource::new(&cfg.source_path)))
    }

    pub fn build_with_source(cfg: &Config, source: Arc<dyn SourceProvider>) -> Result<Self, AppError> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.storage_root)
            .map_err(|source| AppError::Storage { path: cfg.storage_root.display().to_string(), source })?;
        let audit = Arc::new(FsAudit::default());
        let (backend, sim, local): (Arc<dyn Backend>, _, _) = match cfg.backend {
            BackendKind::Sim => {
                let mut sim = SimBackend::new().with_audit(audit.clone());
                if let Some(cap) = cfg.sim.capacity {
                    sim = sim.with_capacity(cap);
                }
                for p in template_programs().into_iter().chain(cfg.sim.programs.iter().cloned()) {
                    sim.program(p);
                }
                let sim = Arc::new(sim);
                sim.start_clock(Duration::from_millis(cfg.sim.tick_ms));
                (sim.clone(), Some(sim), None)
            }
            BackendKind::Local => {
                let mut images = default_image_table();
                images.extend(cfg.local.images.clone());
                let local =
                    Arc::new(LocalBackend::new(images, Duration::from_millis(cfg.local.poll_interval_ms)));
                (local.clone(), None, Some(local))
            }
        };
        let store = WorkspaceStore::new(&cfg.storage_root).with_audit(audit.clone());
        let notifier = Arc::new(Notifier::new(cfg.notify.webhook_url.as_deref(), cfg.notify.buffer_size));
        let engine = Engine::new(cfg.engine_config()?, backend, store, source, notifier);
        let gateway = Arc::new(Gateway::new(cfg.hook_token.clone(), Arc::new(engine.intake())));
        Ok(Self { engine, gateway, sim, local, audit })
    }

    /// Webhook routes plus the read-only status API.
    pub fn router(&self) -> Router {
        self.gateway.clone().router().merge(portal::router(self.engine.clone()))
    }

    pub async fn serve(&self, listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), AppError> {
        axum::serve(listener, self.router()).with_graceful_shutdown(shutdown).await.map_err(AppError::Serve)
    }

    /// Stops the sim clock or every local child process.
    pub fn shutdown(&self) {
        if let Some(sim) = &self.sim {
            sim.stop_clock();
        }
        if let Some(local) = &self.local {
            local.stop_all();
        }
    }

    /// Live deploy tasks per ref tag, straight from the backend.
    pub fn running_deploys(&self) -> BTreeMap<String, usize> {
        crate::scenario::running_deploys(self.engine.backend().as_ref())
    }
}

pub async fn bind(cfg: &Config) -> Result<TcpListener, AppError> {
    let addr = cfg.bind.addr();
    TcpListener::bind(addr).await.map_err(|source| AppError::Bind { addr: addr.to_string(), source })
}
