use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::backend::{Endpoint, TaskHandle};
use crate::gateway::{PipelineEvent, RefKey};
use crate::reporting::TestReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Checkout,
    Prepare,
    RegisterTaskdefs,
    Build,
    Deploy,
    Test,
    Report,
    Cleanup,
}

impl Stage {
    pub const ORDER: [Stage; 8] = [
        Stage::Checkout,
        Stage::Prepare,
        Stage::RegisterTaskdefs,
        Stage::Build,
        Stage::Deploy,
        Stage::Test,
        Stage::Report,
        Stage::Cleanup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Checkout => "checkout",
            Stage::Prepare => "prepare",
            Stage::RegisterTaskdefs => "register-taskdefs",
            Stage::Build => "build",
            Stage::Deploy => "deploy",
            Stage::Test => "test",
            Stage::Report => "report",
            Stage::Cleanup => "cleanup",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Running,
    Success,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    InProgress,
    Success,
    Failed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub run_id: String,
    pub run_number: u64,
    #[serde(rename = "ref")]
    pub ref_key: RefKey,
    pub trigger: PipelineEvent,
    pub stages: Vec<StageRecord>,
    pub outcome: Outcome,
    pub artifact_paths: Vec<String>,
    pub report: Option<TestReport>,
    /// Task id of the deploy task this run left running.
    pub environment: Option<String>,
    pub error: Option<String>,
}

impl PipelineRun {
    pub fn new(run_id: String, run_number: u64, trigger: PipelineEvent) -> Self {
        Self {
            run_id,
            run_number,
            ref_key: trigger.ref_key.clone(),
            trigger,
            stages: Stage::ORDER
                .iter()
                .map(|&stage| StageRecord {
                    stage,
                    status: StageStatus::Pending,
                    started_at: None,
                    ended_at: None,
                    detail: None,
                })
                .collect(),
            outcome: Outcome::InProgress,
            artifact_paths: Vec::new(),
            report: None,
            environment: None,
            error: None,
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageRecord {
        self.stages.iter().find(|s| s.stage == stage).expect("every stage is recorded")
    }

    pub(crate) fn stage_mut(&mut self, stage: Stage) -> &mut StageRecord {
        self.stages.iter_mut().find(|s| s.stage == stage).expect("every stage is recorded")
    }

    pub fn status_of(&self, stage: Stage) -> StageStatus {
        self.stage(stage).status
    }

    /// `stage:status` pairs, for compact listings.
    pub fn stage_summary(&self) -> Vec<String> {
        self.stages
            .iter()
            .map(|s| format!("{}:{}", s.stage.as_str(), serde_json::to_value(s.status).unwrap().as_str().unwrap()))
            .collect()
    }

    pub fn is_finished(&self) -> bool {
        self.outcome != Outcome::InProgress
    }

    /// Checks the stage-log rules for a finished run: fixed order, failures
    /// skip every later stage except cleanup, cleanup ran, and the outcome
    /// agrees with the stage statuses.
    pub fn check_stage_log(&self) -> Result<(), String> {
        let order: Vec<Stage> = self.stages.iter().map(|s| s.stage).collect();
        if order != Stage::ORDER {
            return Err(format!("stage order {order:?}"));
        }
        if !self.is_finished() {
            return Err("run not finished".into());
        }
        let never_started = self.stages.iter().all(|s| s.status == StageStatus::Skipped);
        if never_started {
            return if self.outcome == Outcome::Aborted {
                Ok(())
            } else {
                Err("all stages skipped but outcome is not aborted".into())
            };
        }
        let mut failed_seen = false;
        for s in &self.stages {
            match s.status {
                StageStatus::Pending | StageStatus::Running => {
                    return Err(format!("{} left {:?}", s.stage.as_str(), s.status));
                }
                StageStatus::Failed => failed_seen = true,
                StageStatus::Success if failed_seen && s.stage != Stage::Cleanup => {
                    return Err(format!("{} ran after a failure", s.stage.as_str()));
                }
                _ => {}
            }
        }
        let cleanup = self.status_of(Stage::Cleanup);
        if cleanup == StageStatus::Skipped || cleanup == StageStatus::Pending {
            return Err("cleanup did not run".into());
        }
        let all_ok = self
            .stages
            .iter()
            .all(|s| matches!(s.status, StageStatus::Success | StageStatus::Skipped));
        match self.outcome {
            Outcome::Success if !all_ok => Err("success outcome with a failed stage".into()),
            Outcome::Failed if all_ok => Err("failed outcome without a failed stage".into()),
            _ => Ok(()),
        }
    }
}

/// A live per-ref QA environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentRecord {
    #[serde(rename = "ref")]
    pub ref_key: RefKey,
    pub task: TaskHandle,
    pub endpoint: Endpoint,
    pub created_by_run: String,
}

/// Result of one cleanup pipeline execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanupRecord {
    pub delivery_id: String,
    #[serde(rename = "ref")]
    pub ref_key: RefKey,
    pub stopped_count: usize,
    pub completed_at: DateTime<Utc>,
}
