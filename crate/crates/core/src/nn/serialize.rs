//! Canonical byte encoding of model weights.
//!
//! Layout: `b"VFIA"`, `u16` format version, `u32` layer count, then for each
//! layer `u32` rows and `u32` cols followed by the row-major weights and the
//! biases, all little-endian binary64. Activations are not part of the stream.

use super::{Activation, FcnnModel, Layer, NnError, Tensor2};

pub const MAGIC: &[u8; 4] = b"VFIA";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode_model(model: &FcnnModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + model.param_count() * 8 + model.layers().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        out.extend_from_slice(&(layer.weight.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.weight.cols() as u32).to_le_bytes());
        out.extend(layer.weight.data().iter().flat_map(|v| v.to_le_bytes()));
        out.extend(layer.bias.iter().flat_map(|v| v.to_le_bytes()));
    }
    out
}

/// Decode with ReLU hidden layers and an identity output.
pub fn decode_model(bytes: &[u8]) -> Result<FcnnModel, NnError> {
    decode_model_with(bytes, Activation::Relu, Activation::Identity)
}

pub fn decode_model_with(
    bytes: &[u8],
    hidden: Activation,
    output: Activation,
) -> Result<FcnnModel, NnError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(NnError::Decode("bad magic".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(NnError::Decode(format!("unsupported format version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let weights = cur.f64s(rows * cols)?;
        let bias = cur.f64s(cols)?;
        let activation = if i + 1 == count { output } else { hidden };
        layers.push(Layer::new(Tensor2::from_vec(rows, cols, weights)?, bias, activation)?);
    }
    if cur.pos != bytes.len() {
        return Err(NnError::Decode(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    FcnnModel::new(layers)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NnError::Decode(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| NnError::Decode("overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
