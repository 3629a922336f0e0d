//! Source materialization for the checkout stage.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::gateway::{RefKey, RefKind};
use crate::workspace::copy_dir;

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("source repository {0} not found")]
    Missing(PathBuf),
    #[error("merge of {head} into {base} has conflicts")]
    MergeConflict { head: String, base: String },
    #[error("copying sources: {0}")]
    Io(#[from] std::io::Error),
}

/// Materializes the sources for `(ref, commit)` into `dest`. For pull
/// requests the tree is the projected merge with the main branch.
pub trait SourceProvider: Send + Sync {
    fn materialize(&self, ref_key: &RefKey, commit: Option<&str>, dest: &Path) -> Result<(), SourceError>;
}

/// Copies a configured local directory. There is no version control behind
/// it, so every commit and every projected merge yields the same tree.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    root: PathBuf,
}

impl DirectorySource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl SourceProvider for DirectorySource {
    fn materialize(&self, _ref_key: &RefKey, _commit: Option<&str>, dest: &Path) -> Result<(), SourceError> {
        if !self.root.is_dir() {
            return Err(SourceError::Missing(self.root.clone()));
        }
        copy_dir(&self.root, dest, &mut |_| {})?;
        Ok(())
    }
}

/// Wraps a provider and fails the projected merge for listed commits.
pub struct ConflictingCommits<S> {
    inner: S,
    commits: BTreeSet<String>,
}

impl<S: SourceProvider> ConflictingCommits<S> {
    pub fn new(inner: S, commits: impl IntoIterator<Item = String>) -> Self {
        Self { inner, commits: commits.into_iter().collect() }
    }
}

impl<S: SourceProvider> SourceProvider for ConflictingCommits<S> {
    fn materialize(&self, ref_key: &RefKey, commit: Option<&str>, dest: &Path) -> Result<(), SourceError> {
        if ref_key.kind == RefKind::PullRequest {
            if let Some(c) = commit.filter(|c| self.commits.contains(*c)) {
                return Err(SourceError::MergeConflict { head: c.to_owned(), base: "main".into() });
            }
        }
        self.inner.materialize(ref_key, commit, dest)
    }
}
