//! Simulated trust boundary: sealed baseline hashes, data and model
//! validation, confidential audit sampling and in-enclave shallow inference.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::audit::round_count;
use crate::nn::{encode_model, FcnnModel, Tensor2};
use crate::privacy::Perturbation;
use crate::protocol::{ModelArtifact, PartyData};
use crate::rng;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))?;
        Ok(Digest(arr))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ArtifactKind {
    Dataset,
    Model,
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArtifactKind::Dataset => "dataset",
            ArtifactKind::Model => "model",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ArtifactDigest {
    pub kind: ArtifactKind,
    pub digest: Digest,
    pub version_tag: String,
}

/// Outcome of the model acceptance test run before provisioning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AcceptanceReport {
    pub validation_accuracy: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnclaveError {
    #[error("sealed baseline is write-once")]
    SealedWriteViolation,
    #[error("acceptance accuracy {accuracy:.4} below threshold {threshold:.4}")]
    AcceptanceFailure { accuracy: f64, threshold: f64 },
    #[error("{kind} does not match the sealed baseline")]
    ArtifactMismatch { kind: ArtifactKind },
    #[error("no baseline has been provisioned")]
    NotProvisioned,
    #[error("block needs {needed} bytes of EPC, budget is {budget}")]
    EpcOverflow { needed: usize, budget: usize },
    #[error("shallow model has not been validated in this session")]
    ValidationRequired,
    #[error("attestation does not match this enclave")]
    AttestationMismatch,
    #[error("invalid input: {0}")]
    Input(String),
    #[error("sealed state: {0}")]
    Persistence(String),
}

/// Capability proving the holder attested this enclave instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attestation {
    nonce: [u8; 16],
    pub measurement: Digest,
}

pub const SEALED_MAGIC: &[u8; 4] = b"VFSE";
pub const SEALED_VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Enclave {
    sealed_data: Option<ArtifactDigest>,
    sealed_model: Option<ArtifactDigest>,
    nonce: [u8; 16],
    epc_budget: usize,
    acceptance_threshold: f64,
    shallow: Option<FcnnModel>,
    shallow_bytes: usize,
    sigma: Option<Perturbation>,
}

impl Enclave {
    pub fn new(epc_budget: usize, acceptance_threshold: f64, seed: u64) -> Self {
        let mut nonce = [0u8; 16];
        rng::stream(seed, rng::STREAM_NONCE).fill_bytes(&mut nonce);
        Self {
            sealed_data: None,
            sealed_model: None,
            nonce,
            epc_budget,
            acceptance_threshold,
            shallow: None,
            shallow_bytes: 0,
            sigma: None,
        }
    }

    pub fn epc_budget(&self) -> usize {
        self.epc_budget
    }

    pub fn sealed_data(&self) -> Option<&ArtifactDigest> {
        self.sealed_data.as_ref()
    }

    pub fn sealed_model(&self) -> Option<&ArtifactDigest> {
        self.sealed_model.as_ref()
    }

    pub fn is_model_loaded(&self) -> bool {
        self.shallow.is_some()
    }

    fn measurement(&self) -> Digest {
        let mut h = Sha256::new();
        h.update(self.nonce);
        for d in [&self.sealed_data, &self.sealed_model].into_iter().flatten() {
            h.update(d.digest.0);
        }
        Digest(h.finalize().into())
    }

    pub fn attest(&self) -> Attestation {
        Attestation {
            nonce: self.nonce,
            measurement: self.measurement(),
        }
    }

    fn check_attestation(&self, att: &Attestation) -> Result<(), EnclaveError> {
        if att.nonce != self.nonce || att.measurement != self.measurement() {
            return Err(EnclaveError::AttestationMismatch);
        }
        Ok(())
    }

    /// Seal the dataset and model hashes after a passing acceptance test.
    pub fn provision_baseline(
        &mut self,
        dataset_bytes: &[u8],
        model_bytes: &[u8],
        version_tag: &str,
        acceptance: AcceptanceReport,
    ) -> Result<(ArtifactDigest, ArtifactDigest), EnclaveError> {
        if self.sealed_data.is_some() || self.sealed_model.is_some() {
            return Err(EnclaveError::SealedWriteViolation);
        }
        if !(acceptance.validation_accuracy >= self.acceptance_threshold) {
            return Err(EnclaveError::AcceptanceFailure {
                accuracy: acceptance.validation_accuracy,
                threshold: self.acceptance_threshold,
            });
        }
        let data = ArtifactDigest {
            kind: ArtifactKind::Dataset,
            digest: Digest::of(dataset_bytes),
            version_tag: version_tag.to_string(),
        };
        let model = ArtifactDigest {
            kind: ArtifactKind::Model,
            digest: Digest::of(model_bytes),
            version_tag: version_tag.to_string(),
        };
        self.sealed_data = Some(data.clone());
        self.sealed_model = Some(model.clone());
        Ok((data, model))
    }

    fn check(&self, kind: ArtifactKind, bytes: &[u8]) -> Result<(), EnclaveError> {
        let sealed = match kind {
            ArtifactKind::Dataset => &self.sealed_data,
            ArtifactKind::Model => &self.sealed_model,
        };
        let sealed = sealed.as_ref().ok_or(EnclaveError::NotProvisioned)?;
        if Digest::of(bytes) == sealed.digest {
            Ok(())
        } else {
            Err(EnclaveError::ArtifactMismatch { kind })
        }
    }

    pub fn validate_data_bytes(&self, dataset_bytes: &[u8]) -> Result<(), EnclaveError> {
        self.check(ArtifactKind::Dataset, dataset_bytes)
    }

    /// Recompute the whole-dataset digest and check that every batch id
    /// belongs to the validated dataset.
    pub fn validate_data(&self, dataset: &PartyData, batch_ids: &[u64]) -> Result<(), EnclaveError> {
        self.validate_data_bytes(&dataset.canonical_bytes())?;
        match batch_ids.iter().find(|id| !dataset.contains(**id)) {
            Some(id) => Err(EnclaveError::Input(format!("batch id {id} is not in the dataset"))),
            None => Ok(()),
        }
    }

    pub fn validate_model(&self, model_bytes: &[u8]) -> Result<(), EnclaveError> {
        self.check(ArtifactKind::Model, model_bytes)
    }

    /// Validate artifact bytes and, on success, load the shallow model and σ.
    /// A failed validation also unloads any previously loaded model.
    pub fn load_model(&mut self, model_bytes: &[u8]) -> Result<(), EnclaveError> {
        self.shallow = None;
        self.sigma = None;
        self.validate_model(model_bytes)?;
        let artifact = ModelArtifact::from_canonical_bytes(model_bytes, "")
            .map_err(|e| EnclaveError::Input(e.to_string()))?;
        self.shallow_bytes = encode_model(&artifact.shallow).len();
        if self.shallow_bytes > self.epc_budget {
            return Err(EnclaveError::EpcOverflow {
                needed: self.shallow_bytes,
                budget: self.epc_budget,
            });
        }
        self.shallow = Some(artifact.shallow);
        self.sigma = Some(artifact.sigma);
        Ok(())
    }

    /// Uniform sample of `round(w·N)` ids (at least one), without replacement.
    pub fn confidential_select(
        &self,
        att: &Attestation,
        ids: &[u64],
        w: f64,
        seed: u64,
    ) -> Result<BTreeSet<u64>, EnclaveError> {
        self.check_attestation(att)?;
        if !(w > 0.0 && w <= 1.0) {
            return Err(EnclaveError::Input(format!("sampling ratio {w} outside (0, 1]")));
        }
        let mut unique: Vec<u64> = ids.to_vec();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != ids.len() {
            return Err(EnclaveError::Input("duplicate ids".into()));
        }
        let count = round_count(w, unique.len());
        let mut r = rng::stream(seed, rng::STREAM_SELECT);
        Ok(index::sample(&mut r, unique.len(), count)
            .into_iter()
            .map(|i| unique[i])
            .collect())
    }

    /// `ẑ = f_sm(x) + σ` for one block.
    pub fn enclave_forward(&self, att: &Attestation, block: &Tensor2) -> Result<Tensor2, EnclaveError> {
        self.check_attestation(att)?;
        let (shallow, sigma) = match (&self.shallow, &self.sigma) {
            (Some(m), Some(s)) => (m, s),
            _ => return Err(EnclaveError::ValidationRequired),
        };
        let needed = block.byte_len() + self.shallow_bytes;
        if needed > self.epc_budget {
            return Err(EnclaveError::EpcOverflow {
                needed,
                budget: self.epc_budget,
            });
        }
        let z = shallow.forward(block).map_err(|e| EnclaveError::Input(e.to_string()))?;
        sigma.apply(&z).map_err(|e| EnclaveError::Input(e.to_string()))
    }

    /// Versioned blob with the sealed digests, nonce and configuration.
    /// Loaded models are not persisted; they must be revalidated.
    pub fn seal_state(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SEALED_MAGIC);
        out.extend_from_slice(&SEALED_VERSION.to_le_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.epc_budget as u64).to_le_bytes());
        out.extend_from_slice(&self.acceptance_threshold.to_le_bytes());
        for d in [&self.sealed_data, &self.sealed_model] {
            match d {
                None => out.push(0),
                Some(d) => {
                    out.push(1);
                    out.extend_from_slice(&d.digest.0);
                    out.extend_from_slice(&(d.version_tag.len() as u32).to_le_bytes());
                    out.extend_from_slice(d.version_tag.as_bytes());
                }
            }
        }
        out
    }

    pub fn unseal_state(bytes: &[u8]) -> Result<Self, EnclaveError> {
        let bad = |m: &str| EnclaveError::Persistence(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<Vec<u8>, EnclaveError> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
            let s = bytes[pos..end].to_vec();
            pos = end;
            Ok(s)
        };
        if take(4)? != SEALED_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != SEALED_VERSION {
            return Err(bad(&format!("version {version}, expected {SEALED_VERSION}")));
        }
        let nonce: [u8; 16] = take(16)?.try_into().unwrap();
        let epc_budget = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let acceptance_threshold = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut sealed = [None, None];
        for (slot, kind) in sealed.iter_mut().zip([ArtifactKind::Dataset, ArtifactKind::Model]) {
            match take(1)?[0] {
                0 => {}
                1 => {
                    let digest = Digest(take(32)?.try_into().unwrap());
                    let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                    let version_tag = String::from_utf8(take(len)?).map_err(|_| bad("version tag is not UTF-8"))?;
                    *slot = Some(ArtifactDigest {
                        kind,
                        digest,
                        version_tag,
                    });
                }
                _ => return Err(bad("bad presence flag")),
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let [sealed_data, sealed_model] = sealed;
        Ok(Self {
            sealed_data,
            sealed_model,
            nonce,
            epc_budget,
            acceptance_threshold,
            shallow: None,
            shallow_bytes: 0,
            sigma: None,
        })
    }
}
