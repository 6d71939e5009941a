//! Parties, aligned data, model artifacts and the message-level dataflow of
//! split training and both inference paths.

mod artifact;
mod dataset;
mod message;
mod session;

pub use artifact::{ModelArtifact, ARTIFACT_MAGIC, ARTIFACT_VERSION};
pub use dataset::{load_csv, AlignedDataset, FeatureManifest, PartyData, DATASET_MAGIC, DATASET_VERSION};
pub use session::{
    Coordinator, DataParty, EpochLog, ModelDims, PathResult, PredictionBatch, TaskParty, TrainConfig, TrainLog,
    TrainOutcome, TrustedPathError, UntrustedRuntime, VflSession,
};
pub use message::{Message, MessageKind, PartyId, PartyRole, Payload, TranscriptRecord, Transport};

use thiserror::Error;

use crate::nn::NnError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("unknown sample id {0}")]
    UnknownId(u64),
    #[error("message: {0}")]
    Message(String),
    #[error("model artifact: {0}")]
    Artifact(String),
    #[error("training diverged in epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}
