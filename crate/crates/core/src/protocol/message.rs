use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::ProtocolError;
use crate::nn::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PartyRole {
    Task,
    Data,
    Coordinator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "role", content = "index", rename_all = "camelCase")]
pub enum PartyId {
    Task,
    Data(usize),
    Coordinator,
}

impl PartyId {
    pub fn role(self) -> PartyRole {
        match self {
            PartyId::Task => PartyRole::Task,
            PartyId::Data(_) => PartyRole::Data,
            PartyId::Coordinator => PartyRole::Coordinator,
        }
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartyId::Task => write!(f, "task"),
            PartyId::Data(i) => write!(f, "data{i}"),
            PartyId::Coordinator => write!(f, "coordinator"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MessageKind {
    /// Batch ids chosen by the task party.
    IdBatch,
    /// Data-party output: ẑ to the coordinator, or h_d on the untrusted path.
    Representation,
    /// Deep-model output the coordinator routes to the task party for joining.
    JointRepresentation,
    /// Gradient with respect to a representation.
    GradientShare,
    /// Trusted-path output for one audit block.
    TrustedResult,
    AuditVerdict,
}

impl MessageKind {
    fn tag(self) -> u8 {
        match self {
            MessageKind::IdBatch => 1,
            MessageKind::Representation => 2,
            MessageKind::JointRepresentation => 3,
            MessageKind::GradientShare => 4,
            MessageKind::TrustedResult => 5,
            MessageKind::AuditVerdict => 6,
        }
    }
}

/// Typed message body. Bodies never carry labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Ids(Vec<u64>),
    /// `tag` is a batch or block index; `ids` may be empty when the receiver
    /// must not learn sample identities.
    Batch { tag: u64, ids: Vec<u64>, tensor: Tensor2 },
    Verdict { flagged: bool, inconsistent: u64, sampled: u64 },
}

impl Payload {
    fn fits(&self, kind: MessageKind) -> bool {
        matches!(
            (kind, self),
            (MessageKind::IdBatch, Payload::Ids(_))
                | (MessageKind::AuditVerdict, Payload::Verdict { .. })
                | (
                    MessageKind::Representation
                        | MessageKind::JointRepresentation
                        | MessageKind::GradientShare
                        | MessageKind::TrustedResult,
                    Payload::Batch { .. }
                )
        )
    }

    pub fn encode(&self, kind: MessageKind) -> Vec<u8> {
        let mut out = vec![kind.tag()];
        let push_ids = |out: &mut Vec<u8>, ids: &[u64]| {
            out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
            out.extend(ids.iter().flat_map(|i| i.to_le_bytes()));
        };
        match self {
            Payload::Ids(ids) => push_ids(&mut out, ids),
            Payload::Batch { tag, ids, tensor } => {
                out.extend_from_slice(&tag.to_le_bytes());
                push_ids(&mut out, ids);
                out.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
                out.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
                out.extend(tensor.to_le_bytes());
            }
            Payload::Verdict {
                flagged,
                inconsistent,
                sampled,
            } => {
                out.push(*flagged as u8);
                out.extend_from_slice(&inconsistent.to_le_bytes());
                out.extend_from_slice(&sampled.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(kind: MessageKind, bytes: &[u8]) -> Result<Payload, ProtocolError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(1)?[0] != kind.tag() {
            return Err(malformed("payload tag does not match message kind"));
        }
        let payload = match kind {
            MessageKind::IdBatch => Payload::Ids(r.ids()?),
            MessageKind::AuditVerdict => {
                let flagged = match r.take(1)?[0] {
                    0 => false,
                    1 => true,
                    _ => return Err(malformed("bad verdict flag")),
                };
                Payload::Verdict {
                    flagged,
                    inconsistent: r.u64()?,
                    sampled: r.u64()?,
                }
            }
            _ => {
                let tag = r.u64()?;
                let ids = r.ids()?;
                let rows = r.u64()? as usize;
                let cols = r.u64()? as usize;
                let count = rows
                    .checked_mul(cols)
                    .and_then(|c| c.checked_mul(8))
                    .ok_or_else(|| malformed("overflow"))?;
                let data = r
                    .take(count)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Payload::Batch {
                    tag,
                    ids,
                    tensor: Tensor2::from_vec(rows, cols, data)?,
                }
            }
        };
        if r.pos != bytes.len() {
            return Err(malformed("trailing payload bytes"));
        }
        Ok(payload)
    }
}

fn malformed(m: &str) -> ProtocolError {
    ProtocolError::Message(m.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| malformed("truncated payload"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn ids(&mut self) -> Result<Vec<u64>, ProtocolError> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| malformed("overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub from: PartyId,
    pub to: PartyId,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
    pub virtual_send_time: f64,
}

impl Message {
    pub fn new(
        from: PartyId,
        to: PartyId,
        kind: MessageKind,
        payload: &Payload,
        virtual_send_time: f64,
    ) -> Result<Self, ProtocolError> {
        if !payload.fits(kind) {
            return Err(ProtocolError::Message(format!("{kind:?} cannot carry this payload")));
        }
        if from == to {
            return Err(ProtocolError::Message("sender and receiver are the same party".into()));
        }
        if !virtual_send_time.is_finite() || virtual_send_time < 0.0 {
            return Err(ProtocolError::Message("send time must be finite and non-negative".into()));
        }
        Ok(Self {
            from,
            to,
            kind,
            payload: payload.encode(kind),
            virtual_send_time,
        })
    }

    pub fn decode(&self) -> Result<Payload, ProtocolError> {
        Payload::decode(self.kind, &self.payload)
    }

    pub fn payload_sha256(&self) -> String {
        hex::encode(Sha256::digest(&self.payload))
    }
}

/// One transcript line; payload bodies are summarised by hash and size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TranscriptRecord {
    pub seq: usize,
    pub from: String,
    pub to: String,
    pub kind: MessageKind,
    pub send_time: f64,
    pub deliver_time: f64,
    pub received_at: Option<f64>,
    pub payload_bytes: usize,
    pub payload_sha256: String,
}

#[derive(Clone, Debug)]
struct Slot {
    message: Message,
    received_at: Option<f64>,
}

/// In-memory message queue on a virtual clock with a fixed link latency.
#[derive(Clone, Debug, Default)]
pub struct Transport {
    link_latency: f64,
    slots: Vec<Slot>,
}

impl Transport {
    pub fn new(link_latency: f64) -> Self {
        assert!(link_latency >= 0.0 && link_latency.is_finite(), "bad link latency");
        Self {
            link_latency,
            slots: Vec::new(),
        }
    }

    pub fn link_latency(&self) -> f64 {
        self.link_latency
    }

    pub fn send(&mut self, message: Message) -> usize {
        self.slots.push(Slot {
            message,
            received_at: None,
        });
        self.slots.len() - 1
    }

    /// Deliver to `to` every pending message whose arrival time is at or
    /// before `now`, in send order.
    pub fn receive(&mut self, to: PartyId, now: f64) -> Vec<Message> {
        let latency = self.link_latency;
        self.slots
            .iter_mut()
            .filter(|s| s.received_at.is_none() && s.message.to == to && s.message.virtual_send_time + latency <= now)
            .map(|s| {
                s.received_at = Some(now);
                s.message.clone()
            })
            .collect()
    }

    /// Receive exactly one pending message of `kind` from `from`, waiting
    /// (advancing `now`) until it has arrived. Returns the message and the
    /// receive time.
    pub fn receive_one(
        &mut self,
        to: PartyId,
        from: PartyId,
        kind: MessageKind,
        now: f64,
    ) -> Result<(Message, f64), ProtocolError> {
        let latency = self.link_latency;
        let slot = self
            .slots
            .iter_mut()
            .find(|s| s.received_at.is_none() && s.message.to == to && s.message.from == from && s.message.kind == kind)
            .ok_or_else(|| ProtocolError::Message(format!("no pending {kind:?} from {from} to {to}")))?;
        let at = now.max(slot.message.virtual_send_time + latency);
        slot.received_at = Some(at);
        Ok((slot.message.clone(), at))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.slots.iter().map(|s| &s.message)
    }

    pub fn pending(&self) -> usize {
        self.slots.iter().filter(|s| s.received_at.is_none()).count()
    }

    pub fn transcript(&self) -> Vec<TranscriptRecord> {
        self.slots
            .iter()
            .enumerate()
            .map(|(seq, s)| TranscriptRecord {
                seq,
                from: s.message.from.to_string(),
                to: s.message.to.to_string(),
                kind: s.message.kind,
                send_time: s.message.virtual_send_time,
                deliver_time: s.message.virtual_send_time + self.link_latency,
                received_at: s.received_at,
                payload_bytes: s.message.payload.len(),
                payload_sha256: s.message.payload_sha256(),
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in self.transcript() {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}
