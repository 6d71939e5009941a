use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::nn::{decode_model, decode_model_with, encode_model, Activation, FcnnModel, NnError, Tensor2};
use crate::privacy::Perturbation;

pub const ARTIFACT_MAGIC: &[u8; 4] = b"VFMA";
pub const ARTIFACT_VERSION: u16 = 1;

/// A data party's deployable model: shallow part, learned perturbation and
/// deep part. The full untrusted model is `deep(shallow(x) + σ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub version: String,
    pub shallow: FcnnModel,
    pub sigma: Perturbation,
    pub deep: FcnnModel,
}

impl ModelArtifact {
    pub fn new(
        version: impl Into<String>,
        shallow: FcnnModel,
        sigma: Perturbation,
        deep: FcnnModel,
    ) -> Result<Self, ProtocolError> {
        if sigma.width() != shallow.out_dim() || shallow.out_dim() != deep.in_dim() {
            return Err(NnError::Shape {
                op: "ModelArtifact::new",
                detail: format!(
                    "shallow out {}, sigma {}, deep in {}",
                    shallow.out_dim(),
                    sigma.width(),
                    deep.in_dim()
                ),
            }
            .into());
        }
        Ok(Self {
            version: version.into(),
            shallow,
            sigma,
            deep,
        })
    }

    /// `ẑ = shallow(x) + σ`.
    pub fn perturbed_shallow(&self, x: &Tensor2) -> Result<Tensor2, ProtocolError> {
        Ok(self.sigma.apply(&self.shallow.forward(x)?)?)
    }

    pub fn full_forward(&self, x: &Tensor2) -> Result<Tensor2, ProtocolError> {
        Ok(self.deep.forward(&self.perturbed_shallow(x)?)?)
    }

    /// `b"VFMA"`, `u16` version, then length-prefixed (`u64`) shallow model
    /// stream, `u32`-counted σ values, length-prefixed deep model stream.
    /// The version tag is metadata and not hashed.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let shallow = encode_model(&self.shallow);
        let deep = encode_model(&self.deep);
        let mut out = Vec::with_capacity(6 + 20 + shallow.len() + deep.len() + 8 * self.sigma.width());
        out.extend_from_slice(ARTIFACT_MAGIC);
        out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
        out.extend_from_slice(&(shallow.len() as u64).to_le_bytes());
        out.extend_from_slice(&shallow);
        out.extend_from_slice(&(self.sigma.width() as u32).to_le_bytes());
        out.extend(self.sigma.values().iter().flat_map(|v| v.to_le_bytes()));
        out.extend_from_slice(&(deep.len() as u64).to_le_bytes());
        out.extend_from_slice(&deep);
        out
    }

    pub fn from_canonical_bytes(bytes: &[u8], version: impl Into<String>) -> Result<Self, ProtocolError> {
        let bad = |m: &str| ProtocolError::Artifact(m.to_string());
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ProtocolError> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let mut pos = 0;
        if take(&mut pos, 4)? != ARTIFACT_MAGIC {
            return Err(bad("bad magic"));
        }
        if u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) != ARTIFACT_VERSION {
            return Err(bad("unsupported version"));
        }
        let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let shallow = decode_model_with(take(&mut pos, len)?, Activation::Relu, Activation::Relu)?;
        let width = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let sigma: Vec<f64> = take(&mut pos, width.checked_mul(8).ok_or_else(|| bad("overflow"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let deep = decode_model(take(&mut pos, len)?)?;
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Self::new(version, shallow, Perturbation::new(sigma)?, deep)
    }
}
