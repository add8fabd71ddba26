use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::digest::Digest;
use crate::ids::{NodeId, Round};

pub const DEFAULT_MAX_RECORD_BODY: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Data,
    AdoptionSignal,
    Redirect,
    FinalMarkerPayload,
}

impl RecordKind {
    fn tag(self) -> u8 {
        match self {
            RecordKind::Data => 0,
            RecordKind::AdoptionSignal => 1,
            RecordKind::Redirect => 2,
            RecordKind::FinalMarkerPayload => 3,
        }
    }

    fn from_tag(tag: u8, offset: usize) -> Result<Self, DecodeError> {
        Ok(match tag {
            0 => RecordKind::Data,
            1 => RecordKind::AdoptionSignal,
            2 => RecordKind::Redirect,
            3 => RecordKind::FinalMarkerPayload,
            tag => return Err(DecodeError::BadTag { what: "record kind", tag, offset }),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Record {
    pub record_id: String,
    pub kind: RecordKind,
    #[serde(with = "hex_bytes")]
    pub body: Vec<u8>,
}

impl Record {
    pub fn new(record_id: impl Into<String>, kind: RecordKind, body: impl Into<Vec<u8>>) -> Self {
        Self { record_id: record_id.into(), kind, body: body.into() }
    }

    pub fn data(record_id: impl Into<String>, body: impl Into<Vec<u8>>) -> Self {
        Self::new(record_id, RecordKind::Data, body)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    Normal,
    Final,
}

/// A ledger block. `id` is the SHA-256 digest of every other field in
/// canonical order; the "signature" of the producer is the `(producer, id)`
/// pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: Digest,
    pub parent_id: Digest,
    pub height: u64,
    pub producer: NodeId,
    pub round: Round,
    pub records: Vec<Record>,
    pub marker: Marker,
}

impl Block {
    pub fn new(
        parent_id: Digest,
        height: u64,
        producer: NodeId,
        round: Round,
        records: Vec<Record>,
        marker: Marker,
    ) -> Self {
        let mut b = Block { id: Digest::ZERO, parent_id, height, producer, round, records, marker };
        b.id = b.compute_id();
        b
    }

    pub fn is_genesis(&self) -> bool {
        self.parent_id == Digest::ZERO
    }

    pub fn is_final(&self) -> bool {
        self.marker == Marker::Final
    }

    /// Digest of the canonical preimage (all fields except `id`).
    pub fn compute_id(&self) -> Digest {
        let mut enc = Encoder::new();
        self.encode_preimage(&mut enc);
        Digest::of(&enc.finish())
    }

    fn encode_preimage(&self, enc: &mut Encoder) {
        enc.digest(&self.parent_id)
            .u64(self.height)
            .u32(self.producer.0)
            .u64(self.round)
            .u32(self.records.len() as u32);
        for r in &self.records {
            enc.str(&r.record_id).u8(r.kind.tag()).bytes(&r.body);
        }
        enc.u8(match self.marker {
            Marker::Normal => 0,
            Marker::Final => 1,
        });
    }

    /// Canonical serialization: `id` followed by the preimage.
    pub fn encode_into(&self, enc: &mut Encoder) {
        enc.digest(&self.id);
        self.encode_preimage(enc);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_into(&mut enc);
        enc.finish()
    }

    /// Decodes a block without checking its digest.
    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let id = dec.digest()?;
        let parent_id = dec.digest()?;
        let height = dec.u64()?;
        let producer = NodeId(dec.u32()?);
        let round = dec.u64()?;
        let n = dec.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let record_id = dec.string()?;
            let at = dec.position();
            let kind = RecordKind::from_tag(dec.u8()?, at)?;
            let body = dec.bytes()?.to_vec();
            records.push(Record { record_id, kind, body });
        }
        let at = dec.position();
        let marker = match dec.u8()? {
            0 => Marker::Normal,
            1 => Marker::Final,
            tag => return Err(DecodeError::BadTag { what: "marker", tag, offset: at }),
        };
        Ok(Block { id, parent_id, height, producer, round, records, marker })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let b = Self::decode(&mut dec)?;
        dec.expect_end()?;
        Ok(b)
    }

    pub fn record(&self, record_id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.record_id == record_id)
    }
}

/// The shared genesis block: parent `GENESIS`, height 0, no records.
pub fn genesis() -> Arc<Block> {
    static GENESIS: OnceLock<Arc<Block>> = OnceLock::new();
    GENESIS
        .get_or_init(|| Arc::new(Block::new(Digest::ZERO, 0, NodeId::GENESIS, 0, Vec::new(), Marker::Normal)))
        .clone()
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
