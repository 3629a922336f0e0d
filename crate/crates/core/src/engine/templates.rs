//! Task-definition templates.
//!
//! Each template is a JSON task definition whose volume-mount path holds the
//! `{{WORKSPACE}}` marker. Rendering substitutes the ref's workspace
//! directory there and renames the definition per ref; nothing else in the
//! template changes.

use std::path::Path;

use crate::backend::{TaskDefinition, WORKSPACE_MARKER};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    Build,
    Deploy,
    Test,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] = [TemplateKind::Build, TemplateKind::Deploy, TemplateKind::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Build => "build",
            TemplateKind::Deploy => "deploy",
            TemplateKind::Test => "test",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("{0} template has no {WORKSPACE_MARKER} marker")]
    NoMarker(&'static str),
    #[error("{0} template has no volume mount")]
    NoVolumeMount(&'static str),
    #[error("{kind} template is not a valid task definition: {source}")]
    Parse { kind: &'static str, source: serde_json::Error },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct Templates {
    pub build: String,
    pub deploy: String,
    pub test: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Templates {
    /// The templates shipped in the repository's `templates/` directory.
    pub fn builtin() -> Self {
        Self {
            build: include_str!("../../../../templates/build.json").to_owned(),
            deploy: include_str!("../../../../templates/deploy.json").to_owned(),
            test: include_str!("../../../../templates/test.json").to_owned(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self, TemplateError> {
        let read = |name: &str| {
            let path = dir.join(format!("{name}.json"));
            std::fs::read_to_string(&path)
                .map_err(|source| TemplateError::Io { path: path.display().to_string(), source })
        };
        Ok(Self { build: read("build")?, deploy: read("deploy")?, test: read("test")? })
    }

    pub fn get(&self, kind: TemplateKind) -> &str {
        match kind {
            TemplateKind::Build => &self.build,
            TemplateKind::Deploy => &self.deploy,
            TemplateKind::Test => &self.test,
        }
    }
}

pub fn definition_name(safe_id: &str, kind: TemplateKind) -> String {
    format!("{safe_id}-{}", kind.as_str())
}

pub fn render_template(
    kind: TemplateKind,
    template: &str,
    workspace: &Path,
    name: &str,
) -> Result<TaskDefinition, TemplateError> {
    if !template.contains(WORKSPACE_MARKER) {
        return Err(TemplateError::NoMarker(kind.as_str()));
    }
    let quoted = serde_json::to_string(&workspace.display().to_string()).expect("path serializes");
    let escaped = &quoted[1..quoted.len() - 1];
    let rendered = template.replace(WORKSPACE_MARKER, escaped);
    let mut def: TaskDefinition = serde_json::from_str(&rendered)
        .map_err(|source| TemplateError::Parse { kind: kind.as_str(), source })?;
    if def.volume_mounts.is_empty() {
        return Err(TemplateError::NoVolumeMount(kind.as_str()));
    }
    def.name = name.to_owned();
    Ok(def)
}
