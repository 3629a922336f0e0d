use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::refkey::{make_ref_key, RefKey, RefKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    BranchPushed,
    PrOpened,
    PrUpdated,
    BranchDeleted,
    PrClosed,
}

impl EventKind {
    /// Events that trigger the main build/deploy/test pipeline.
    pub fn is_main(self) -> bool {
        matches!(self, EventKind::BranchPushed | EventKind::PrOpened | EventKind::PrUpdated)
    }

    /// Events that trigger the cleanup pipeline.
    pub fn is_cleanup(self) -> bool {
        !self.is_main()
    }

    pub fn ref_kind(self) -> RefKind {
        match self {
            EventKind::BranchPushed | EventKind::BranchDeleted => RefKind::Branch,
            _ => RefKind::PullRequest,
        }
    }
}

/// A normalized event that has not yet been stamped with its delivery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventDraft {
    pub kind: EventKind,
    #[serde(rename = "ref")]
    pub ref_key: RefKey,
    pub commit_id: Option<String>,
    pub repository: Option<String>,
}

impl EventDraft {
    pub fn stamp(self, delivery_id: impl Into<String>, received_at: DateTime<Utc>) -> PipelineEvent {
        PipelineEvent {
            kind: self.kind,
            ref_key: self.ref_key,
            commit_id: self.commit_id,
            repository: self.repository,
            delivery_id: delivery_id.into(),
            received_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineEvent {
    pub kind: EventKind,
    #[serde(rename = "ref")]
    pub ref_key: RefKey,
    pub commit_id: Option<String>,
    pub repository: Option<String>,
    pub delivery_id: String,
    pub received_at: DateTime<Utc>,
}

impl PipelineEvent {
    /// Builds an event directly, bypassing payload parsing. Used by the CLI
    /// and by scenario replay.
    pub fn synthetic(kind: EventKind, name: &str, commit_id: Option<&str>) -> Self {
        EventDraft {
            kind,
            ref_key: make_ref_key(kind.ref_kind(), name),
            commit_id: commit_id.map(str::to_owned),
            repository: None,
        }
        .stamp(uuid::Uuid::new_v4().to_string(), Utc::now())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Normalized {
    Event(EventDraft),
    Ignored(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed {event} payload: {reason}")]
pub struct MalformedPayload {
    pub event: String,
    pub reason: String,
}

fn malformed(event: &str, reason: impl Into<String>) -> MalformedPayload {
    MalformedPayload { event: event.to_owned(), reason: reason.into() }
}

fn str_field<'a>(payload: &'a Value, pointer: &str) -> Option<&'a str> {
    payload.pointer(pointer).and_then(Value::as_str)
}

/// Maps a source-host event name and payload onto a pipeline event.
///
/// | event          | condition                         | result          |
/// |----------------|-----------------------------------|-----------------|
/// | `push`         | `refs/heads/*`, not deleted       | branch-pushed   |
/// | `push`         | tag ref or `deleted: true`        | ignored         |
/// | `delete`       | `ref_type = branch`               | branch-deleted  |
/// | `delete`       | any other `ref_type`              | ignored         |
/// | `pull_request` | `opened` / `reopened`             | pr-opened       |
/// | `pull_request` | `synchronize`                     | pr-updated      |
/// | `pull_request` | `closed`                          | pr-closed       |
/// | `pull_request` | any other action                  | ignored         |
/// | anything else  |                                   | ignored         |
pub fn normalize_event(event_name: &str, payload: &Value) -> Result<Normalized, MalformedPayload> {
    let repository = str_field(payload, "/repository/full_name").map(str::to_owned);
    match event_name {
        "push" => {
            let git_ref = str_field(payload, "/ref").ok_or_else(|| malformed("push", "missing `ref`"))?;
            if payload.get("deleted").and_then(Value::as_bool) == Some(true) {
                return Ok(Normalized::Ignored(
                    "push-shaped deletion; deletions arrive on the lifecycle hook".into(),
                ));
            }
            let Some(branch) = git_ref.strip_prefix("refs/heads/") else {
                return Ok(Normalized::Ignored(format!("push to non-branch ref `{git_ref}`")));
            };
            if branch.is_empty() {
                return Err(malformed("push", "empty branch name"));
            }
            let commit = str_field(payload, "/head_commit/id")
                .or_else(|| str_field(payload, "/after"))
                .ok_or_else(|| malformed("push", "missing `head_commit.id` and `after`"))?;
            Ok(Normalized::Event(EventDraft {
                kind: EventKind::BranchPushed,
                ref_key: make_ref_key(RefKind::Branch, branch),
                commit_id: Some(commit.to_owned()),
                repository,
            }))
        }
        "delete" => {
            let git_ref = str_field(payload, "/ref").ok_or_else(|| malformed("delete", "missing `ref`"))?;
            let ref_type =
                str_field(payload, "/ref_type").ok_or_else(|| malformed("delete", "missing `ref_type`"))?;
            if ref_type != "branch" {
                return Ok(Normalized::Ignored(format!("deletion of {ref_type} `{git_ref}`")));
            }
            let branch = git_ref.strip_prefix("refs/heads/").unwrap_or(git_ref);
            if branch.is_empty() {
                return Err(malformed("delete", "empty branch name"));
            }
            Ok(Normalized::Event(EventDraft {
                kind: EventKind::BranchDeleted,
                ref_key: make_ref_key(RefKind::Branch, branch),
                commit_id: None,
                repository,
            }))
        }
        "pull_request" => {
            let action = str_field(payload, "/action")
                .ok_or_else(|| malformed("pull_request", "missing `action`"))?;
            let number = payload
                .get("number")
                .or_else(|| payload.pointer("/pull_request/number"))
                .and_then(Value::as_u64)
                .ok_or_else(|| malformed("pull_request", "missing `number`"))?;
            let kind = match action {
                "opened" | "reopened" => EventKind::PrOpened,
                "synchronize" => EventKind::PrUpdated,
                "closed" => EventKind::PrClosed,
                other => return Ok(Normalized::Ignored(format!("pull_request action `{other}`"))),
            };
            let commit_id = if kind.is_main() {
                str_field(payload, "/pull_request/head/sha").map(str::to_owned)
            } else {
                None
            };
            Ok(Normalized::Event(EventDraft {
                kind,
                ref_key: make_ref_key(RefKind::PullRequest, &number.to_string()),
                commit_id,
                repository,
            }))
        }
        _ => Ok(Normalized::Ignored("unsupported event".into())),
    }
}
