//! Experiment configuration and orchestration: synthetic data, end-to-end
//! audited runs, λ sweeps and multi-party scaling.

mod config;
mod run;
mod synthetic;

pub use config::{DatasetSource, ExperimentConfig, SplitFractions};
pub use run::{
    audit_query, empirical_detection, plan_ratio, run_end_to_end, scale_parties, scale_parties_for, split_ids,
    sweep_lambda, train_system, write_outputs, write_scale_csv, write_sweep_csv, DetectionEstimate, OutputFiles,
    PartyAudit, RunSummary, ScaleRow, Splits, StageTimings, SweepRow, TrainedSystem,
};
pub use synthetic::{generate_synthetic, SyntheticParams};

use thiserror::Error;

use crate::audit::AuditError;
use crate::enclave::EnclaveError;
use crate::nn::NnError;
use crate::pipeline::PipelineError;
use crate::protocol::{ProtocolError, TrustedPathError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn stage<E: std::error::Error + Send + Sync + 'static>(stage: &'static str) -> impl Fn(E) -> HarnessError {
        move |e| HarnessError::Stage {
            stage,
            source: Box::new(e),
        }
    }
}

impl From<TrustedPathError> for HarnessError {
    fn from(e: TrustedPathError) -> Self {
        HarnessError::stage("trusted inference")(e)
    }
}

impl From<EnclaveError> for HarnessError {
    fn from(e: EnclaveError) -> Self {
        HarnessError::stage("enclave")(e)
    }
}

impl From<AuditError> for HarnessError {
    fn from(e: AuditError) -> Self {
        HarnessError::stage("audit")(e)
    }
}

impl From<PipelineError> for HarnessError {
    fn from(e: PipelineError) -> Self {
        HarnessError::stage("pipeline")(e)
    }
}
