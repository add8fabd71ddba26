//! Unstable (longest-chain) and stable (quorum finality) consensus, the
//! honest/dishonest mode predicate, and the weighted producer lottery.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rand_core::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::chain::{Block, ChainView};
use crate::digest::Digest;
use crate::ids::{NodeId, Weight};

pub const DEFAULT_CONFIRMATION_DEPTH: u64 = 6;

/// Quorum fraction `q` in `(1/2, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Quorum(Ratio<u64>);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QuorumError {
    #[error("quorum {0} must lie in (1/2, 1]")]
    OutOfRange(String),
    #[error("cannot parse quorum {0:?}; expected \"n/d\"")]
    Parse(String),
}

impl Quorum {
    pub fn new(numer: u64, denom: u64) -> Result<Self, QuorumError> {
        if denom == 0 || numer * 2 <= denom || numer > denom {
            return Err(QuorumError::OutOfRange(format!("{numer}/{denom}")));
        }
        Ok(Quorum(Ratio::new(numer, denom)))
    }

    pub fn two_thirds() -> Self {
        Quorum(Ratio::new(2, 3))
    }

    pub fn numer(&self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u64 {
        *self.0.denom()
    }

    /// `weight >= q * total`, exactly.
    pub fn reached(&self, weight: Weight, total: Weight) -> bool {
        weight as u128 * self.denom() as u128 >= self.numer() as u128 * total as u128
    }

    pub fn as_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }
}

impl fmt::Display for Quorum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

impl FromStr for Quorum {
    type Err = QuorumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |x: &str| x.trim().parse::<u64>().map_err(|_| QuorumError::Parse(s.to_string()));
        match s.split_once('/') {
            Some((n, d)) => Quorum::new(parse(n)?, parse(d)?),
            None => Quorum::new(parse(s)?, 1),
        }
    }
}

impl Serialize for Quorum {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Quorum {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConsensusRule {
    /// Longest chain; any block may be revised.
    Unstable {
        #[serde(default = "default_depth")]
        confirmation_depth: u64,
    },
    /// Quorum finality; finalized blocks are never revised.
    Stable {
        #[serde(default = "Quorum::two_thirds")]
        quorum_fraction: Quorum,
    },
}

fn default_depth() -> u64 {
    DEFAULT_CONFIRMATION_DEPTH
}

impl Default for ConsensusRule {
    fn default() -> Self {
        ConsensusRule::Unstable { confirmation_depth: DEFAULT_CONFIRMATION_DEPTH }
    }
}

impl ConsensusRule {
    pub fn unstable(k: u64) -> Self {
        ConsensusRule::Unstable { confirmation_depth: k }
    }

    pub fn stable(quorum_fraction: Quorum) -> Self {
        ConsensusRule::Stable { quorum_fraction }
    }

    pub fn is_stable(&self) -> bool {
        matches!(self, ConsensusRule::Stable { .. })
    }

    pub fn confirmation_depth(&self) -> Option<u64> {
        match self {
            ConsensusRule::Unstable { confirmation_depth } => Some(*confirmation_depth),
            ConsensusRule::Stable { .. } => None,
        }
    }

    pub fn quorum(&self) -> Option<Quorum> {
        match self {
            ConsensusRule::Stable { quorum_fraction } => Some(*quorum_fraction),
            ConsensusRule::Unstable { .. } => None,
        }
    }

    /// Height below which a view's chain counts as settled: finalized under
    /// stable rules, `k`-confirmed under unstable ones.
    pub fn settled_height(&self, view: &ChainView) -> u64 {
        match self {
            ConsensusRule::Stable { .. } => view.finalized_height(),
            ConsensusRule::Unstable { confirmation_depth } => {
                view.tip_height().saturating_sub(*confirmation_depth)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Honest,
    Dishonest,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Honest => "honest",
            Mode::Dishonest => "dishonest",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModeState {
    pub mode: Mode,
    /// Infimum of the weight whose addition or removal flips the mode.
    pub margin_to_flip: Ratio<u64>,
}

impl ModeState {
    pub fn margin_f64(&self) -> f64 {
        *self.margin_to_flip.numer() as f64 / *self.margin_to_flip.denom() as f64
    }
}

/// Honest mode iff honest weight clears the rule's threshold.
///
/// Unstable: `honest > dishonest` (a tie is dishonest). Stable with quorum
/// `q`: `dishonest < (1 - q) * total`. The margin is the smallest weight
/// change that crosses the threshold. Since `q > 1/2` the cheapest move is
/// adding dishonest weight (from honest mode) or removing it (from dishonest
/// mode), giving `|(1-q)h - q d| / q` — unless there is no honest weight, in
/// which case removing every dishonest node still leaves a dishonest tie and
/// honest weight `q d / (1-q)` must be added instead. With `q = 1` honest
/// mode is unreachable and the margin saturates at `u64::MAX`.
pub fn mode_predicate(rule: &ConsensusRule, honest: Weight, dishonest: Weight) -> ModeState {
    let (num, den) = match rule {
        ConsensusRule::Unstable { .. } => (1u128, 2u128),
        ConsensusRule::Stable { quorum_fraction } => {
            (quorum_fraction.numer() as u128, quorum_fraction.denom() as u128)
        }
    };
    let lhs = (den - num) * honest as u128;
    let rhs = num * dishonest as u128;
    let mode = if rhs < lhs { Mode::Honest } else { Mode::Dishonest };
    let gap = lhs.abs_diff(rhs);
    let per = if mode == Mode::Dishonest && lhs == 0 { den - num } else { num };
    let margin_to_flip = if per == 0 {
        Ratio::from_integer(u64::MAX)
    } else {
        Ratio::new(gap as u64, per as u64)
    };
    ModeState { mode, margin_to_flip }
}

/// Weight-proportional lottery among willing producers. Consumes exactly one
/// draw when the list is non-empty.
pub fn elect_producer<R: RngCore + ?Sized>(willing: &[(NodeId, Weight)], rng: &mut R) -> Option<NodeId> {
    let total: u128 = willing.iter().map(|(_, w)| *w as u128).sum();
    if willing.is_empty() || total == 0 {
        return None;
    }
    let pick = (rng.next_u64() as u128 * total) >> 64;
    let mut acc = 0u128;
    for (id, w) in willing {
        acc += *w as u128;
        if pick < acc {
            return Some(*id);
        }
    }
    willing.last().map(|(id, _)| *id)
}

/// Per-chain registry of finalized heights, used to detect conflicting
/// finalizations.
#[derive(Clone, Debug, Default)]
pub struct FinalityLedger {
    by_height: BTreeMap<u64, Digest>,
}

impl FinalityLedger {
    pub fn get(&self, height: u64) -> Option<Digest> {
        self.by_height.get(&height).copied()
    }

    pub fn len(&self) -> usize {
        self.by_height.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_height.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Finality {
    Finalized,
    Pending,
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
#[error("conflicting finalization at height {height}: {existing:?} vs {conflicting:?}")]
pub struct SafetyViolation {
    pub height: u64,
    pub existing: Digest,
    pub conflicting: Digest,
}

/// One synchronous finalization attempt for `proposal`. Approvals from the
/// same node count once.
pub fn finalize_step(
    quorum: Quorum,
    proposal: &Block,
    approvals: &[(NodeId, Weight)],
    active_weight: Weight,
    ledger: &mut FinalityLedger,
) -> Result<Finality, SafetyViolation> {
    let mut seen = BTreeSet::new();
    let approving: Weight = approvals
        .iter()
        .filter(|(id, _)| seen.insert(*id))
        .map(|(_, w)| *w)
        .sum();
    if active_weight == 0 || !quorum.reached(approving, active_weight) {
        return Ok(Finality::Pending);
    }
    match ledger.by_height.get(&proposal.height) {
        Some(existing) if *existing != proposal.id => Err(SafetyViolation {
            height: proposal.height,
            existing: *existing,
            conflicting: proposal.id,
        }),
        _ => {
            ledger.by_height.insert(proposal.height, proposal.id);
            Ok(Finality::Finalized)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confirmation {
    Unconfirmed,
    Confirmed,
}

/// Depth-`k` confirmation: on the tip path and at least `k` blocks deep.
pub fn confirmation_status(view: &ChainView, block: &Digest, k: u64) -> Confirmation {
    match view.get(block) {
        Some(b) if view.is_on_tip_path(block) && view.tip_height() - b.height >= k => Confirmation::Confirmed,
        _ => Confirmation::Unconfirmed,
    }
}
