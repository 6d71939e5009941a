use serde::{Deserialize, Serialize};

use super::PipelineError;

/// How long one block spends on the enclave→coordinator link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "mode")]
pub enum CommMode {
    /// Fixed cost per block regardless of its size.
    Constant,
    /// `commConstantSeconds + bytes / bytesPerSecond`.
    Linear { bytes_per_second: f64 },
}

/// Analytic per-device costs on the virtual clock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct CostModel {
    pub per_sample_tee_seconds: f64,
    pub per_sample_coord_seconds: f64,
    pub per_sample_untrusted_seconds: f64,
    pub comm_constant_seconds: f64,
    pub epc_bytes: usize,
    pub tee_slowdown_factor: f64,
    pub comm_mode: CommMode,
    /// Enclave-resident bytes per input sample.
    pub sample_bytes: usize,
    /// Bytes per perturbed representation sent to the coordinator.
    pub representation_bytes: usize,
    /// Serialized size of the shallow model held in the enclave.
    pub shallow_model_bytes: usize,
}

pub const DEFAULT_UNTRUSTED_SECONDS: f64 = 1.0e-5;
pub const DEFAULT_TEE_SLOWDOWN: f64 = 6.5;

impl Default for CostModel {
    fn default() -> Self {
        Self::calibrated(DEFAULT_UNTRUSTED_SECONDS, DEFAULT_TEE_SLOWDOWN, 1.0e-6, 2.0e-3)
    }
}

impl CostModel {
    /// Enclave cost derived as `slowdown × untrusted`; 128 MiB EPC.
    pub fn calibrated(untrusted: f64, slowdown: f64, coord: f64, comm: f64) -> Self {
        Self {
            per_sample_tee_seconds: untrusted * slowdown,
            per_sample_coord_seconds: coord,
            per_sample_untrusted_seconds: untrusted,
            comm_constant_seconds: comm,
            epc_bytes: 128 << 20,
            tee_slowdown_factor: slowdown,
            comm_mode: CommMode::Constant,
            sample_bytes: 15 * 8,
            representation_bytes: 16 * 8,
            shallow_model_bytes: 4096,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = [
            ("perSampleTeeSeconds", self.per_sample_tee_seconds),
            ("perSampleCoordSeconds", self.per_sample_coord_seconds),
            ("perSampleUntrustedSeconds", self.per_sample_untrusted_seconds),
            ("commConstantSeconds", self.comm_constant_seconds),
            ("teeSlowdownFactor", self.tee_slowdown_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PipelineError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if let CommMode::Linear { bytes_per_second } = self.comm_mode {
            if !(bytes_per_second > 0.0 && bytes_per_second.is_finite()) {
                return Err(PipelineError::Invalid("bandwidth must be positive".into()));
            }
        }
        if self.epc_bytes == 0 {
            return Err(PipelineError::Invalid("EPC budget must be positive".into()));
        }
        Ok(())
    }

    pub fn tee_time(&self, samples: usize) -> f64 {
        samples as f64 * self.per_sample_tee_seconds
    }

    pub fn comm_time(&self, samples: usize) -> f64 {
        if samples == 0 {
            return 0.0;
        }
        match self.comm_mode {
            CommMode::Constant => self.comm_constant_seconds,
            CommMode::Linear { bytes_per_second } => {
                self.comm_constant_seconds
                    + (samples * self.representation_bytes) as f64 / bytes_per_second
            }
        }
    }

    pub fn coord_time(&self, samples: usize) -> f64 {
        samples as f64 * self.per_sample_coord_seconds
    }

    pub fn untrusted_time(&self, samples: usize) -> f64 {
        samples as f64 * self.per_sample_untrusted_seconds
    }

    /// Enclave memory needed to hold one block plus the shallow model.
    pub fn block_footprint(&self, samples: usize) -> usize {
        samples * self.sample_bytes + self.shallow_model_bytes
    }
}
