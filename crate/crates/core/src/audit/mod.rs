//! Sampling audit: detection probability, latency-neutral sampling ratio,
//! detectability threshold, consistency comparison and detection metrics.

mod report;
mod sampling;

pub use report::{
    compare_and_report, AuditReport, ComparisonMode, InferenceRecord, LatencyStats, Verdict,
};
pub use sampling::{
    dsr, dsr_counts, min_detectable_k, monte_carlo_dsr, optimal_w, round_count, AuditParams,
    AuditPlan, KThreshold, MonteCarloEstimate,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuditError {
    #[error("invalid audit parameters: {0}")]
    InvalidParams(String),
    #[error("no abnormal ratio reaches detection rate {target} with N={n}, W={w}")]
    NoFeasibleK { n: usize, w: f64, target: f64 },
    #[error("sampled id {0} has no {1} record")]
    Coverage(u64, &'static str),
    #[error("duplicate record for id {0}")]
    DuplicateRecord(u64),
}
