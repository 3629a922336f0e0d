//! Monthly infrastructure cost projection.
//!
//! ```text
//! total = base_infra_monthly
//!       + branches × env_hours_per_branch_per_month × env_hour_rate
//!       + branches × pushes_per_branch_per_day × 30
//!                  × (build_minutes_per_push + test_minutes_per_push) × task_minute_rate
//! ```
//!
//! Default rates are calibrated, 2024-era figures: the base covers an
//! orchestrator host plus two runner nodes (3 × t3.large on-demand at
//! $0.0832/h × 730 h, plus 3 × 50 GB gp3 at $0.08/GB-month); environments
//! and tasks are priced as 2 vCPU / 4 GB serverless containers
//! ($0.04048 per vCPU-hour, $0.004445 per GB-hour). They carry no claim
//! beyond landing the 11-branch reference scenario near USD 1000.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const DAYS_PER_MONTH: f64 = 30.0;
pub const BREAKDOWN_BASE: &str = "base_infra";
pub const BREAKDOWN_ENVIRONMENTS: &str = "environments";
pub const BREAKDOWN_TASKS: &str = "tasks";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub active_branches: u32,
    pub pushes_per_branch_per_day: f64,
    pub build_minutes_per_push: f64,
    pub test_minutes_per_push: f64,
    pub env_hours_per_branch_per_month: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRates {
    pub base_infra_monthly: f64,
    pub env_hour_rate: f64,
    pub task_minute_rate: f64,
}

const VCPU_HOUR: f64 = 0.04048;
const GB_HOUR: f64 = 0.004445;
const CONTAINER_HOUR: f64 = 2.0 * VCPU_HOUR + 4.0 * GB_HOUR;

impl Default for CostRates {
    fn default() -> Self {
        Self {
            base_infra_monthly: 3.0 * 0.0832 * 730.0 + 3.0 * 50.0 * 0.08,
            env_hour_rate: CONTAINER_HOUR,
            task_minute_rate: CONTAINER_HOUR / 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub total: f64,
    pub breakdown: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("{field} must be a non-negative finite number, got {value}")]
    Negative { field: &'static str, value: f64 },
    #[error("scenario file: {0}")]
    Scenario(String),
}

fn check(field: &'static str, value: f64) -> Result<(), CostError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(CostError::Negative { field, value })
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        check("pushes_per_branch_per_day", self.pushes_per_branch_per_day)?;
        check("build_minutes_per_push", self.build_minutes_per_push)?;
        check("test_minutes_per_push", self.test_minutes_per_push)?;
        check("env_hours_per_branch_per_month", self.env_hours_per_branch_per_month)
    }
}

impl CostRates {
    pub fn validate(&self) -> Result<(), CostError> {
        check("base_infra_monthly", self.base_infra_monthly)?;
        check("env_hour_rate", self.env_hour_rate)?;
        check("task_minute_rate", self.task_minute_rate)
    }
}

pub fn estimate_monthly_cost(p: &CostParams, r: &CostRates) -> Result<CostEstimate, CostError> {
    p.validate()?;
    r.validate()?;
    let branches = f64::from(p.active_branches);
    let environments = branches * p.env_hours_per_branch_per_month * r.env_hour_rate;
    let tasks = branches
        * p.pushes_per_branch_per_day
        * DAYS_PER_MONTH
        * (p.build_minutes_per_push + p.test_minutes_per_push)
        * r.task_minute_rate;
    let breakdown = BTreeMap::from([
        (BREAKDOWN_BASE.to_owned(), r.base_infra_monthly),
        (BREAKDOWN_ENVIRONMENTS.to_owned(), environments),
        (BREAKDOWN_TASKS.to_owned(), tasks),
    ]);
    Ok(CostEstimate { total: r.base_infra_monthly + environments + tasks, breakdown })
}

/// A cost scenario file. `rates` falls back to the calibrated defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostScenario {
    #[serde(default)]
    pub description: String,
    pub params: CostParams,
    #[serde(default)]
    pub rates: Option<CostRates>,
    #[serde(default)]
    pub assumptions: BTreeMap<String, String>,
}

impl CostScenario {
    pub fn load(path: &Path) -> Result<Self, CostError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CostError::Scenario(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CostError::Scenario(format!("{}: {e}", path.display())))
    }

    pub fn estimate(&self) -> Result<CostEstimate, CostError> {
        estimate_monthly_cost(&self.params, &self.rates.unwrap_or_default())
    }
}
