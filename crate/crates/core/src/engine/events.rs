//! Simulation events and the event-log file.
//!
//! Event-log layout (little-endian, `str`/`bytes` are u32-length-prefixed):
//!
//! ```text
//! magic     8 bytes "CEEVLOG1"
//! scenario  str     canonical scenario JSON
//! seed      u64
//! then one frame per event until end of file:
//!   len u32, event bytes
//! event bytes: round u64, seq u32, tag u8, payload (per kind, see `encode`)
//! ```
//!
//! The log digest is SHA-256 over the concatenated frames (length
//! prefixes included), so it covers every event and nothing else.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chain::{Anchor, Block};
use crate::codec::{DecodeError, Decoder, Encoder};
use crate::consensus::Mode;
use crate::digest::{Digest, DigestWriter};
use crate::ids::{ChainId, NodeId, Round};

pub const EVENT_LOG_MAGIC: &[u8; 8] = b"CEEVLOG1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventData {
    BlockProduced {
        producer: NodeId,
        chain: ChainId,
        /// Producer disposition at production time.
        honest: bool,
        /// Withheld on a private fork when produced.
        private: bool,
        #[serde(with = "block_hex")]
        block: Arc<Block>,
    },
    ForkPublished { node: NodeId, base: Digest, tip: Digest, height: u64, victims: Vec<NodeId> },
    TipChanged { node: NodeId, old: Digest, new: Digest, height: u64, reorg_depth: u64 },
    Finalized { node: NodeId, id: Digest, height: u64 },
    ModeChanged { mode: Mode, honest_weight: u64, dishonest_weight: u64 },
    NodeJoined { node: NodeId },
    NodeLeft { node: NodeId },
    Defection { node: NodeId },
    Suppression { by: NodeId, from: NodeId, to: NodeId, dropped: u32 },
    ShutdownStep { step: String, detail: String },
    SafetyViolation { height: u64, existing: Digest, conflicting: Digest },
    SnapshotTaken { archivist: NodeId, height: u64, digest: Digest },
    CommitmentPublished { index: u64, digest: Digest, publisher: NodeId },
    FreezeConflict { node: NodeId, block: Digest, frozen_height: u64 },
    PermanentSplit { groups: Vec<(Anchor, Vec<NodeId>)> },
    /// Messages sent in the round, honest senders counted separately.
    Traffic { honest_messages: u64, total_messages: u64 },
    ChainSwitch { node: NodeId, chain: ChainId },
}

impl EventData {
    pub fn kind(&self) -> &'static str {
        match self {
            EventData::BlockProduced { .. } => "block_produced",
            EventData::ForkPublished { .. } => "fork_published",
            EventData::TipChanged { .. } => "tip_changed",
            EventData::Finalized { .. } => "finalized",
            EventData::ModeChanged { .. } => "mode_changed",
            EventData::NodeJoined { .. } => "node_joined",
            EventData::NodeLeft { .. } => "node_left",
            EventData::Defection { .. } => "defection",
            EventData::Suppression { .. } => "suppression",
            EventData::ShutdownStep { .. } => "shutdown_step",
            EventData::SafetyViolation { .. } => "safety_violation",
            EventData::SnapshotTaken { .. } => "snapshot_taken",
            EventData::CommitmentPublished { .. } => "commitment_published",
            EventData::FreezeConflict { .. } => "freeze_conflict",
            EventData::PermanentSplit { .. } => "permanent_split",
            EventData::Traffic { .. } => "traffic",
            EventData::ChainSwitch { .. } => "chain_switch",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            EventData::BlockProduced { .. } => 0,
            EventData::ForkPublished { .. } => 1,
            EventData::TipChanged { .. } => 2,
            EventData::Finalized { .. } => 3,
            EventData::ModeChanged { .. } => 4,
            EventData::NodeJoined { .. } => 5,
            EventData::NodeLeft { .. } => 6,
            EventData::Defection { .. } => 7,
            EventData::Suppression { .. } => 8,
            EventData::ShutdownStep { .. } => 9,
            EventData::SafetyViolation { .. } => 10,
            EventData::SnapshotTaken { .. } => 11,
            EventData::CommitmentPublished { .. } => 12,
            EventData::FreezeConflict { .. } => 13,
            EventData::PermanentSplit { .. } => 14,
            EventData::Traffic { .. } => 15,
            EventData::ChainSwitch { .. } => 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub round: Round,
    /// Position within the round.
    pub seq: u32,
    #[serde(flatten)]
    pub data: EventData,
}

fn node(enc: &mut Encoder, n: NodeId) {
    enc.u32(n.0);
}

fn nodes(enc: &mut Encoder, ns: &[NodeId]) {
    enc.u32(ns.len() as u32);
    for n in ns {
        enc.u32(n.0);
    }
}

fn read_nodes(dec: &mut Decoder<'_>) -> Result<Vec<NodeId>, DecodeError> {
    let n = dec.u32()? as usize;
    (0..n).map(|_| dec.u32().map(NodeId)).collect()
}

impl SimEvent {
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u64(self.round).u32(self.seq).u8(self.data.tag());
        match &self.data {
            EventData::BlockProduced { producer, chain, honest, private, block } => {
                node(&mut enc, *producer);
                enc.u8(*chain).bool(*honest).bool(*private).bytes(&block.to_bytes());
            }
            EventData::ForkPublished { node: n, base, tip, height, victims } => {
                node(&mut enc, *n);
                enc.digest(base).digest(tip).u64(*height);
                nodes(&mut enc, victims);
            }
            EventData::TipChanged { node: n, old, new, height, reorg_depth } => {
                node(&mut enc, *n);
                enc.digest(old).digest(new).u64(*height).u64(*reorg_depth);
            }
            EventData::Finalized { node: n, id, height } => {
                node(&mut enc, *n);
                enc.digest(id).u64(*height);
            }
            EventData::ModeChanged { mode, honest_weight, dishonest_weight } => {
                enc.u8(match mode {
                    Mode::Honest => 0,
                    Mode::Dishonest => 1,
                })
                .u64(*honest_weight)
                .u64(*dishonest_weight);
            }
            EventData::NodeJoined { node: n } | EventData::NodeLeft { node: n } | EventData::Defection { node: n } => {
                node(&mut enc, *n)
            }
            EventData::Suppression { by, from, to, dropped } => {
                enc.u32(by.0).u32(from.0).u32(to.0).u32(*dropped);
            }
            EventData::ShutdownStep { step, detail } => {
                enc.str(step).str(detail);
            }
            EventData::SafetyViolation { height, existing, conflicting } => {
                enc.u64(*height).digest(existing).digest(conflicting);
            }
            EventData::SnapshotTaken { archivist, height, digest } => {
                enc.u32(archivist.0).u64(*height).digest(digest);
            }
            EventData::CommitmentPublished { index, digest, publisher } => {
                enc.u64(*index).digest(digest).u32(publisher.0);
            }
            EventData::FreezeConflict { node: n, block, frozen_height } => {
                node(&mut enc, *n);
                enc.digest(block).u64(*frozen_height);
            }
            EventData::PermanentSplit { groups } => {
                enc.u32(groups.len() as u32);
                for (anchor, members) in groups {
                    enc.u64(anchor.height).digest(&anchor.id);
                    nodes(&mut enc, members);
                }
            }
            EventData::Traffic { honest_messages, total_messages } => {
                enc.u64(*honest_messages).u64(*total_messages);
            }
            EventData::ChainSwitch { node: n, chain } => {
                node(&mut enc, *n);
                enc.u8(*chain);
            }
        }
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let round = d.u64()?;
        let seq = d.u32()?;
        let at = d.position();
        let tag = d.u8()?;
        let data = match tag {
            0 => EventData::BlockProduced {
                producer: NodeId(d.u32()?),
                chain: d.u8()?,
                honest: d.bool()?,
                private: d.bool()?,
                block: Arc::new(Block::from_bytes(d.bytes()?)?),
            },
            1 => EventData::ForkPublished {
                node: NodeId(d.u32()?),
                base: d.digest()?,
                tip: d.digest()?,
                height: d.u64()?,
                victims: read_nodes(&mut d)?,
            },
            2 => EventData::TipChanged {
                node: NodeId(d.u32()?),
                old: d.digest()?,
                new: d.digest()?,
                height: d.u64()?,
                reorg_depth: d.u64()?,
            },
            3 => EventData::Finalized { node: NodeId(d.u32()?), id: d.digest()?, height: d.u64()? },
            4 => {
                let at = d.position();
                let mode = match d.u8()? {
                    0 => Mode::Honest,
                    1 => Mode::Dishonest,
                    t => return Err(DecodeError::BadTag { what: "mode", tag: t, offset: at }),
                };
                EventData::ModeChanged { mode, honest_weight: d.u64()?, dishonest_weight: d.u64()? }
            }
            5 => EventData::NodeJoined { node: NodeId(d.u32()?) },
            6 => EventData::NodeLeft { node: NodeId(d.u32()?) },
            7 => EventData::Defection { node: NodeId(d.u32()?) },
            8 => EventData::Suppression {
                by: NodeId(d.u32()?),
                from: NodeId(d.u32()?),
                to: NodeId(d.u32()?),
                dropped: d.u32()?,
            },
            9 => EventData::ShutdownStep { step: d.string()?, detail: d.string()? },
            10 => EventData::SafetyViolation { height: d.u64()?, existing: d.digest()?, conflicting: d.digest()? },
            11 => EventData::SnapshotTaken { archivist: NodeId(d.u32()?), height: d.u64()?, digest: d.digest()? },
            12 => EventData::CommitmentPublished { index: d.u64()?, digest: d.digest()?, publisher: NodeId(d.u32()?) },
            13 => EventData::FreezeConflict { node: NodeId(d.u32()?), block: d.digest()?, frozen_height: d.u64()? },
            14 => {
                let n = d.u32()? as usize;
                let mut groups = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let anchor = Anchor { height: d.u64()?, id: d.digest()? };
                    groups.push((anchor, read_nodes(&mut d)?));
                }
                EventData::PermanentSplit { groups }
            }
            15 => EventData::Traffic { honest_messages: d.u64()?, total_messages: d.u64()? },
            16 => EventData::ChainSwitch { node: NodeId(d.u32()?), chain: d.u8()? },
            t => return Err(DecodeError::BadTag { what: "event", tag: t, offset: at }),
        };
        d.expect_end()?;
        Ok(SimEvent { round, seq, data })
    }
}

/// Digest over the framed event stream.
pub fn event_log_digest(events: &[SimEvent]) -> Digest {
    let mut w = DigestWriter::new();
    for e in events {
        let bytes = e.encode();
        w.update(&(bytes.len() as u32).to_le_bytes());
        w.update(&bytes);
    }
    w.finish()
}

/// A decoded event-log file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventLog {
    pub scenario_json: String,
    pub seed: u64,
    pub events: Vec<SimEvent>,
}

impl EventLog {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw(EVENT_LOG_MAGIC).str(&self.scenario_json).u64(self.seed);
        for e in &self.events {
            enc.bytes(&e.encode());
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        if d.raw(8)? != EVENT_LOG_MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let scenario_json = d.string()?;
        let seed = d.u64()?;
        let mut events = Vec::new();
        while !d.is_empty() {
            events.push(SimEvent::decode(d.bytes()?)?);
        }
        Ok(EventLog { scenario_json, seed, events })
    }

    pub fn digest(&self) -> Digest {
        event_log_digest(&self.events)
    }

    /// One JSON object per line, for inspection.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }
}

mod block_hex {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Arc<Block>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b.to_bytes()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Arc<Block>, D::Error> {
        let bytes = hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)?;
        Block::from_bytes(&bytes).map(Arc::new).map_err(serde::de::Error::custom)
    }
}
