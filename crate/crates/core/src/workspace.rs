//! Branch-isolated shared storage.
//!
//! Each ref owns `<storage_root>/<safe-id>/` with `src/`, `out/` and
//! `results/` inside. Tasks mount that directory, which is how sources,
//! build artifacts and test results pass between the build, deploy and test
//! stages.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::Serialize;

use crate::gateway::RefKey;

pub const SRC_DIR: &str = "src";
pub const OUT_DIR: &str = "out";
pub const RESULTS_DIR: &str = "results";

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("storage root {path}: {source}")]
    StorageRoot { path: PathBuf, source: io::Error },
    #[error("workspace {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("source tree {0} does not exist")]
    MissingSource(PathBuf),
    #[error("path {0} escapes the storage root")]
    Escape(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Workspace {
    #[serde(rename = "ref")]
    pub ref_key: RefKey,
    pub root_path: PathBuf,
    pub created_at: DateTime<Utc>,
}

impl Workspace {
    pub fn src(&self) -> PathBuf {
        self.root_path.join(SRC_DIR)
    }

    pub fn out(&self) -> PathBuf {
        self.root_path.join(OUT_DIR)
    }

    pub fn results(&self) -> PathBuf {
        self.root_path.join(RESULTS_DIR)
    }
}

/// One recorded file write, attributed to the ref that caused it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub owner: String,
    pub path: PathBuf,
}

/// Write instrumentation shared by the workspace store and the simulator.
#[derive(Debug, Default)]
pub struct FsAudit {
    entries: Mutex<Vec<AuditEntry>>,
}

impl FsAudit {
    pub fn record(&self, owner: &str, path: &Path) {
        self.entries
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(AuditEntry { owner: owner.to_owned(), path: path.to_owned() });
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Writes that landed outside `<root>/<owner>/`.
    pub fn escapes(&self, root: &Path) -> Vec<AuditEntry> {
        self.entries()
            .into_iter()
            .filter(|e| e.owner.is_empty() || !e.path.starts_with(root.join(&e.owner)))
            .collect()
    }
}

#[derive(Debug)]
pub struct WorkspaceStore {
    root: PathBuf,
    audit: Option<std::sync::Arc<FsAudit>>,
}

impl WorkspaceStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), audit: None }
    }

    pub fn with_audit(mut self, audit: std::sync::Arc<FsAudit>) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, ref_key: &RefKey) -> PathBuf {
        self.root.join(&ref_key.safe_id)
    }

    /// Creates the ref's directory, clearing anything a previous run left.
    pub fn create_workspace(&self, ref_key: &RefKey) -> Result<Workspace, WorkspaceError> {
        let meta = fs::metadata(&self.root)
            .map_err(|source| WorkspaceError::StorageRoot { path: self.root.clone(), source })?;
        if !meta.is_dir() {
            return Err(WorkspaceError::StorageRoot {
                path: self.root.clone(),
                source: io::Error::new(io::ErrorKind::NotADirectory, "not a directory"),
            });
        }
        let path = self.path_for(ref_key);
        self.remove_tree(&path)?;
        let io_err = |source| WorkspaceError::Io { path: path.clone(), source };
        fs::create_dir(&path).map_err(io_err)?;
        for sub in [SRC_DIR, OUT_DIR, RESULTS_DIR] {
            fs::create_dir(path.join(sub)).map_err(io_err)?;
        }
        Ok(Workspace { ref_key: ref_key.clone(), root_path: path, created_at: Utc::now() })
    }

    /// Copies `origin` into the workspace's `src/` directory.
    pub fn stage_sources(&self, ws: &Workspace, origin: &Path) -> Result<usize, WorkspaceError> {
        if !origin.is_dir() {
            return Err(WorkspaceError::MissingSource(origin.to_owned()));
        }
        self.copy_tree(origin, &ws.src(), &ws.ref_key.safe_id)
    }

    fn copy_tree(&self, from: &Path, to: &Path, owner: &str) -> Result<usize, WorkspaceError> {
        self.ensure_inside(to)?;
        copy_dir(from, to, &mut |dst| {
            if let Some(audit) = &self.audit {
                audit.record(owner, dst);
            }
        })
        .map_err(|source| WorkspaceError::Io { path: to.to_owned(), source })
    }

    /// Removes the ref's directory. Symlinks inside are unlinked, never
    /// followed. Errors are logged, not returned.
    pub fn destroy_workspace(&self, ref_key: &RefKey) {
        let path = self.path_for(ref_key);
        if let Err(err) = self.remove_tree(&path) {
            tracing::warn!(path = %path.display(), "workspace removal failed: {err}");
        }
    }

    fn ensure_inside(&self, path: &Path) -> Result<(), WorkspaceError> {
        let rel = path.strip_prefix(&self.root).map_err(|_| WorkspaceError::Escape(path.to_owned()))?;
        let normal = rel
            .components()
            .all(|c| matches!(c, std::path::Component::Normal(_)));
        if !normal || rel.as_os_str().is_empty() {
            return Err(WorkspaceError::Escape(path.to_owned()));
        }
        Ok(())
    }

    fn remove_tree(&self, path: &Path) -> Result<(), WorkspaceError> {
        self.ensure_inside(path)?;
        let meta = match fs::symlink_metadata(path) {
            Ok(m) => m,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(source) => return Err(WorkspaceError::Io { path: path.to_owned(), source }),
        };
        let io_err = |source| WorkspaceError::Io { path: path.to_owned(), source };
        if meta.file_type().is_symlink() || !meta.is_dir() {
            return fs::remove_file(path).map_err(io_err);
        }
        // remove_dir_all does not follow symlinks
        fs::remove_dir_all(path).map_err(io_err)
    }
}

/// Recursively copies regular files and directories from `from` into `to`,
/// calling `on_file` with each destination file. Symlinks and special files
/// are skipped.
pub(crate) fn copy_dir(from: &Path, to: &Path, on_file: &mut dyn FnMut(&Path)) -> io::Result<usize> {
    fs::create_dir_all(to)?;
    let mut entries: Vec<_> = fs::read_dir(from)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    let mut copied = 0;
    for entry in entries {
        let src = entry.path();
        let dst = to.join(entry.file_name());
        let ty = entry.file_type()?;
        if ty.is_dir() {
            copied += copy_dir(&src, &dst, on_file)?;
        } else if ty.is_file() {
            fs::copy(&src, &dst)?;
            on_file(&dst);
            copied += 1;
        } else {
            tracing::debug!(path = %src.display(), "skipping non-regular file in source tree");
        }
    }
    Ok(copied)
}
