//! Service configuration: one JSON document.
//!
//! Relative paths inside the file resolve against the file's directory.

use std::collections::HashMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendKind, ImageSpec, SimProgram, StageTimeout};
use crate::engine::{EngineConfig, Templates};
use crate::notifier::DEFAULT_BUFFER_SIZE;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub storage_root: PathBuf,
    pub hook_token: String,
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    #[serde(default = "default_repository")]
    pub repository: String,
    /// Local directory the checkout stage copies sources from.
    pub source_path: PathBuf,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub status_api_base: Option<String>,
    #[serde(default)]
    pub notify: NotifyConfig,
    #[serde(default)]
    pub bind: BindConfig,
    #[serde(default)]
    pub timeouts: TimeoutConfig,
    #[serde(default = "default_targets")]
    pub build_targets: Vec<String>,
    #[serde(default)]
    pub strict_tests: bool,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub local: LocalConfig,
}

fn default_backend() -> BackendKind {
    BackendKind::Sim
}

fn default_repository() -> String {
    "local/repository".into()
}

fn default_targets() -> Vec<String> {
    vec!["frontend".into(), "backend".into()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NotifyConfig {
    pub webhook_url: Option<String>,
    pub buffer_size: usize,
}

impl Default for NotifyConfig {
    fn default() -> Self {
        Self { webhook_url: None, buffer_size: DEFAULT_BUFFER_SIZE }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BindConfig {
    pub host: IpAddr,
    pub port: u16,
}

impl Default for BindConfig {
    fn default() -> Self {
        Self { host: IpAddr::V4(Ipv4Addr::LOCALHOST), port: 8080 }
    }
}

impl BindConfig {
    pub fn addr(&self) -> SocketAddr {
        SocketAddr::new(self.host, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeoutConfig {
    pub build_secs: u64,
    pub deploy_secs: u64,
    pub test_secs: u64,
    pub build_ticks: u64,
    pub deploy_ticks: u64,
    pub test_ticks: u64,
}

impl Default for TimeoutConfig {
    fn default() -> Self {
        let d = EngineConfig::default();
        Self {
            build_secs: d.build_timeout.wall.as_secs(),
            deploy_secs: d.deploy_timeout.wall.as_secs(),
            test_secs: d.test_timeout.wall.as_secs(),
            build_ticks: d.build_timeout.ticks,
            deploy_ticks: d.deploy_timeout.ticks,
            test_ticks: d.test_timeout.ticks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Wall-clock length of one simulator tick.
    pub tick_ms: u64,
    /// Extra scripted behaviors, applied after the built-in defaults.
    pub programs: Vec<SimProgram>,
    pub capacity: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { tick_ms: 20, programs: Vec::new(), capacity: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalConfig {
    pub poll_interval_ms: u64,
    /// Overrides and additions to the built-in image table.
    pub images: HashMap<String, ImageSpec>,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { poll_interval_ms: 2000, images: HashMap::new() }
    }
}

impl Config {
    /// A configuration with defaults for everything but the three paths
    /// and the token.
    pub fn new(storage_root: impl Into<PathBuf>, source_path: impl Into<PathBuf>, hook_token: impl Into<String>) -> Self {
        Self {
            storage_root: storage_root.into(),
            hook_token: hook_token.into(),
            backend: default_backend(),
            repository: default_repository(),
            source_path: source_path.into(),
            templates_dir: None,
            status_api_base: None,
            notify: NotifyConfig::default(),
            bind: BindConfig::default(),
            timeouts: TimeoutConfig::default(),
            build_targets: default_targets(),
            strict_tests: false,
            sim: SimConfig::default(),
            local: LocalConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        let mut cfg: Config =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_owned(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.storage_root);
        fix(&mut self.source_path);
        if let Some(t) = &mut self.templates_dir {
            fix(t);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.hook_token.is_empty() {
            return Err(ConfigError::Invalid("hook_token must not be empty".into()));
        }
        if self.build_targets.is_empty() {
            return Err(ConfigError::Invalid("build_targets must list at least one target".into()));
        }
        if self.sim.tick_ms == 0 || self.local.poll_interval_ms == 0 {
            return Err(ConfigError::Invalid("tick_ms and poll_interval_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn status_api_base(&self) -> String {
        self.status_api_base.clone().unwrap_or_else(|| format!("http://{}", self.bind.addr()))
    }

    pub fn engine_config(&self) -> Result<EngineConfig, ConfigError> {
        let templates = match &self.templates_dir {
            Some(dir) => Templates::load(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => Templates::builtin(),
        };
        let t = &self.timeouts;
        Ok(EngineConfig {
            repository: self.repository.clone(),
            status_api_base: self.status_api_base(),
            build_targets: self.build_targets.clone(),
            build_timeout: StageTimeout { wall: Duration::from_secs(t.build_secs), ticks: t.build_ticks },
            deploy_timeout: StageTimeout { wall: Duration::from_secs(t.deploy_secs), ticks: t.deploy_ticks },
            test_timeout: StageTimeout { wall: Duration::from_secs(t.test_secs), ticks: t.test_ticks },
            strict_tests: self.strict_tests,
            templates,
        })
    }
}
