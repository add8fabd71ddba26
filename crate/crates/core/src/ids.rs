use std::fmt;

use serde::{Deserialize, Serialize};

/// Consensus weight (hash power or stake), in integer units.
pub type Weight = u64;

/// Simulation round number.
pub type Round = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    /// Producer stamp carried by the genesis block.
    pub const GENESIS: NodeId = NodeId(u32::MAX);
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Identifier of a chain lineage. `0` is the original chain; a hard fork to
/// stable consensus creates chain `1`.
pub type ChainId = u8;
