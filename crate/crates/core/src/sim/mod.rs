//! Deterministic experiments under virtual time: a foreman and a fleet of
//! worker agents with injected delays, plus an independent makespan oracle.

mod config;
mod harness;
mod oracle;
mod report;

use thiserror::Error;

use crate::model::ExecutionMode;

pub use config::{FailureSpec, FleetConfig, StageSpec, WorkerSpec};
pub use harness::{run_mode, Direction, RunOutcome, TraceEntry};
pub use oracle::{makespan_oracle, oracle_prediction, OraclePrediction};
pub use report::{
    render_report, LatencySummary, MetricsReport, ModeReport, ReportFormat, WorkerReport,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unsupported by the oracle: {0}")]
    UnsupportedConfig(String),
    #[error("job rejected: {0}")]
    Rejected(String),
    #[error("job failed: {0}")]
    JobFailed(String),
    #[error("no completion within {0} ms of virtual time")]
    Stalled(u64),
    #[error("io: {0}")]
    Io(String),
}

/// Runs each mode in order on identical fresh fleets.
pub fn run_experiment(
    cfg: &FleetConfig,
    modes: &[ExecutionMode],
) -> Result<MetricsReport, SimError> {
    let runs = modes
        .iter()
        .map(|&m| run_mode(cfg, m).map(|o| o.report))
        .collect::<Result<_, _>>()?;
    Ok(MetricsReport {
        seed: cfg.seed,
        runs,
    })
}
