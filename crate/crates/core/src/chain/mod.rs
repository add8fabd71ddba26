//! Digest-linked blocks, per-node chain views, validation and longest-chain
//! fork choice.

mod block;
mod view;

pub use block::{genesis, Block, Marker, Record, RecordKind, DEFAULT_MAX_RECORD_BODY};
pub use view::{
    chain_digest, fork_choice, locate_record, prefix_digest, serialize_prefix, validate_block,
    Anchor, BlockRejection, ChainView, HeightOutOfRange, Inserted, TieBreak, ORPHAN_CAPACITY,
};
