use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::block::{genesis, Block, Record, DEFAULT_MAX_RECORD_BODY};
use crate::codec::Encoder;
use crate::digest::{Digest, DigestWriter};
use crate::ids::{NodeId, Round};

/// Blocks with an unknown parent are buffered per view up to this many,
/// evicted oldest first.
pub const ORPHAN_CAPACITY: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Earliest arrival round, then smallest digest.
    #[default]
    FirstSeen,
    SmallestDigest,
}

/// A block pinned at a height: the finalized or frozen end of a prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Anchor {
    pub height: u64,
    pub id: Digest,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockRejection {
    #[error("unknown parent {0:?}")]
    UnknownParent(Digest),
    #[error("stored id {stored:?} does not match recomputed digest {recomputed:?}")]
    BadDigest { stored: Digest, recomputed: Digest },
    #[error("height {got}, expected {expected}")]
    BadHeight { got: u64, expected: u64 },
    #[error("record {record_id:?} body is {len} bytes, limit {max}")]
    OversizeRecord { record_id: String, len: usize, max: usize },
    #[error("record id {0:?} repeated within block")]
    DuplicateRecord(String),
}

impl BlockRejection {
    pub fn code(&self) -> &'static str {
        match self {
            BlockRejection::UnknownParent(_) => "unknown-parent",
            BlockRejection::BadDigest { .. } => "bad-digest",
            BlockRejection::BadHeight { .. } => "bad-height",
            BlockRejection::OversizeRecord { .. } => "oversize-record",
            BlockRejection::DuplicateRecord(_) => "duplicate-record",
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("requested height {requested} exceeds tip height {tip}")]
pub struct HeightOutOfRange {
    pub requested: u64,
    pub tip: u64,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("block {block:?} conflicts with anchored block at height {anchor_height}")]
pub struct AnchorConflict {
    pub block: Digest,
    pub anchor_height: u64,
}

/// Result of adding a block to a view.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Inserted {
    /// Newly stored blocks, including any buffered orphans that connected.
    pub added: Vec<Digest>,
    /// `(old, new)` tip when the insertion moved the tip.
    pub tip_change: Option<(Digest, Digest)>,
    /// Blocks that would have won fork choice but conflict with the
    /// finalized or frozen prefix.
    pub blocked: Vec<Digest>,
}

#[derive(Clone, Debug)]
struct Entry {
    block: Arc<Block>,
    arrival: Round,
    withheld: bool,
}

/// One node's local version of the chain.
#[derive(Clone, Debug)]
pub struct ChainView {
    owner: NodeId,
    blocks: HashMap<Digest, Entry>,
    tip: Digest,
    finalized: Anchor,
    frozen: Anchor,
    orphans: VecDeque<(Arc<Block>, Round)>,
    tie_break: TieBreak,
    max_record_body: usize,
}

/// Checks digest, record well-formedness, parent presence and height.
pub fn validate_block(block: &Block, view: &ChainView) -> Result<(), BlockRejection> {
    let recomputed = block.compute_id();
    if recomputed != block.id {
        return Err(BlockRejection::BadDigest { stored: block.id, recomputed });
    }
    let mut seen = HashSet::with_capacity(block.records.len());
    for r in &block.records {
        if r.body.len() > view.max_record_body {
            return Err(BlockRejection::OversizeRecord {
                record_id: r.record_id.clone(),
                len: r.body.len(),
                max: view.max_record_body,
            });
        }
        if !seen.insert(r.record_id.as_str()) {
            return Err(BlockRejection::DuplicateRecord(r.record_id.clone()));
        }
    }
    if block.is_genesis() {
        if block.height != 0 {
            return Err(BlockRejection::BadHeight { got: block.height, expected: 0 });
        }
        return Ok(());
    }
    let parent = view
        .blocks
        .get(&block.parent_id)
        .ok_or(BlockRejection::UnknownParent(block.parent_id))?;
    let expected = parent.block.height + 1;
    if block.height != expected {
        return Err(BlockRejection::BadHeight { got: block.height, expected });
    }
    Ok(())
}

impl ChainView {
    /// A view holding only the shared genesis block.
    pub fn new(owner: NodeId) -> Self {
        Self::with_genesis(owner, genesis())
    }

    pub fn with_genesis(owner: NodeId, genesis: Arc<Block>) -> Self {
        let anchor = Anchor { height: 0, id: genesis.id };
        let mut blocks = HashMap::new();
        let tip = genesis.id;
        blocks.insert(tip, Entry { block: genesis, arrival: 0, withheld: false });
        ChainView {
            owner,
            blocks,
            tip,
            finalized: anchor,
            frozen: anchor,
            orphans: VecDeque::new(),
            tie_break: TieBreak::default(),
            max_record_body: DEFAULT_MAX_RECORD_BODY,
        }
    }

    /// Builds a view from a genesis-first linear prefix. Blocks are not
    /// revalidated beyond parent linkage.
    pub fn from_prefix(owner: NodeId, prefix: &[Arc<Block>], arrival: Round) -> Self {
        let mut view = ChainView::with_genesis(owner, prefix[0].clone());
        for b in &prefix[1..] {
            view.insert(b.clone(), arrival).expect("prefix blocks must link");
        }
        view
    }

    pub fn with_tie_break(mut self, tie_break: TieBreak) -> Self {
        self.tie_break = tie_break;
        self
    }

    pub fn with_max_record_body(mut self, max: usize) -> Self {
        self.max_record_body = max;
        self
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn set_owner(&mut self, owner: NodeId) {
        self.owner = owner;
    }

    pub fn tie_break(&self) -> TieBreak {
        self.tie_break
    }

    pub fn tip(&self) -> Digest {
        self.tip
    }

    pub fn tip_block(&self) -> &Arc<Block> {
        &self.blocks[&self.tip].block
    }

    pub fn tip_height(&self) -> u64 {
        self.tip_block().height
    }

    pub fn genesis_id(&self) -> Digest {
        self.tip_path_iter().last().map(|b| b.id).unwrap_or(Digest::ZERO)
    }

    pub fn finalized(&self) -> Anchor {
        self.finalized
    }

    pub fn finalized_height(&self) -> u64 {
        self.finalized.height
    }

    pub fn frozen(&self) -> Anchor {
        self.frozen
    }

    /// The deeper-reaching of the finalized and frozen anchors.
    pub fn anchor(&self) -> Anchor {
        if self.frozen.height > self.finalized.height {
            self.frozen
        } else {
            self.finalized
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, id: &Digest) -> Option<&Arc<Block>> {
        self.blocks.get(id).map(|e| &e.block)
    }

    pub fn contains(&self, id: &Digest) -> bool {
        self.blocks.contains_key(id)
    }

    pub fn arrival(&self, id: &Digest) -> Option<Round> {
        self.blocks.get(id).map(|e| e.arrival)
    }

    pub fn is_withheld(&self, id: &Digest) -> bool {
        self.blocks.get(id).is_some_and(|e| e.withheld)
    }

    pub fn block_ids(&self) -> impl Iterator<Item = &Digest> {
        self.blocks.keys()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Arc<Block>> {
        self.blocks.values().map(|e| &e.block)
    }

    pub fn orphan_count(&self) -> usize {
        self.orphans.len()
    }

    /// Ancestor of `id` (inclusive) at `height`, if `id` is stored and
    /// reaches that height.
    pub fn ancestor_at(&self, id: &Digest, height: u64) -> Option<Digest> {
        let mut cur = self.blocks.get(id)?;
        if cur.block.height < height {
            return None;
        }
        while cur.block.height > height {
            cur = self.blocks.get(&cur.block.parent_id)?;
        }
        Some(cur.block.id)
    }

    /// True iff `ancestor` lies on the path from genesis to `id`.
    pub fn descends_from(&self, id: &Digest, ancestor: &Anchor) -> bool {
        ancestor.height == 0 && self.contains(id)
            || self.ancestor_at(id, ancestor.height) == Some(ancestor.id)
    }

    fn tip_path_iter(&self) -> PathIter<'_> {
        PathIter { view: self, next: Some(self.tip) }
    }

    /// Blocks from `id` back to genesis, tip first.
    pub fn path_back_from(&self, id: &Digest) -> impl Iterator<Item = &Arc<Block>> {
        PathIter { view: self, next: Some(*id) }
    }

    /// Genesis-first path to the tip.
    pub fn tip_path(&self) -> Vec<Arc<Block>> {
        let mut path: Vec<_> = self.tip_path_iter().cloned().collect();
        path.reverse();
        path
    }

    /// Genesis-first path to `id`.
    pub fn path_to(&self, id: &Digest) -> Vec<Arc<Block>> {
        let mut path: Vec<_> = self.path_back_from(id).cloned().collect();
        path.reverse();
        path
    }

    pub fn is_on_tip_path(&self, id: &Digest) -> bool {
        match self.blocks.get(id) {
            Some(e) => self.ancestor_at(&self.tip, e.block.height) == Some(*id),
            None => false,
        }
    }

    /// The record with `record_id` on the tip path, nearest the tip.
    pub fn find_record(&self, record_id: &str) -> Option<(&Arc<Block>, &Record)> {
        self.tip_path_iter().find_map(|b| b.record(record_id).map(|r| (b, r)))
    }

    fn key_better(&self, a: &Entry, b: &Entry) -> bool {
        key_better(self.tie_break, a, b)
    }

    fn eligible(&self, id: &Digest) -> bool {
        let anchor = self.anchor();
        anchor.height == 0 || self.ancestor_at(id, anchor.height) == Some(anchor.id)
    }

    fn consider(&mut self, candidate: Digest, out: &mut Inserted) {
        let entry = &self.blocks[&candidate];
        if entry.withheld || !self.key_better(entry, &self.blocks[&self.tip]) {
            return;
        }
        if !self.eligible(&candidate) {
            out.blocked.push(candidate);
            return;
        }
        let old = self.tip;
        self.tip = candidate;
        out.tip_change = Some(match out.tip_change {
            Some((first, _)) => (first, candidate),
            None => (old, candidate),
        });
    }

    fn store(&mut self, block: Arc<Block>, arrival: Round, withheld: bool) -> Result<Vec<Digest>, BlockRejection> {
        if let Err(e) = validate_block(&block, self) {
            if let BlockRejection::UnknownParent(_) = e {
                if !self.orphans.iter().any(|(o, _)| o.id == block.id) {
                    if self.orphans.len() == ORPHAN_CAPACITY {
                        self.orphans.pop_front();
                    }
                    self.orphans.push_back((block, arrival));
                }
            }
            return Err(e);
        }
        let mut added = vec![block.id];
        self.blocks.insert(block.id, Entry { block, arrival, withheld });
        // connect any buffered descendants
        let mut i = 0;
        while i < added.len() {
            let parent = added[i];
            let mut j = 0;
            while j < self.orphans.len() {
                if self.orphans[j].0.parent_id == parent {
                    let (orphan, at) = self.orphans.remove(j).unwrap();
                    if validate_block(&orphan, self).is_ok() && !self.contains(&orphan.id) {
                        added.push(orphan.id);
                        self.blocks.insert(orphan.id, Entry { block: orphan, arrival: at, withheld });
                    }
                } else {
                    j += 1;
                }
            }
            i += 1;
        }
        Ok(added)
    }

    /// Validates and stores `block`, updating the tip by fork choice.
    /// Orphans are buffered and reported as `UnknownParent`.
    pub fn insert(&mut self, block: Arc<Block>, arrival: Round) -> Result<Inserted, BlockRejection> {
        let mut out = Inserted::default();
        if self.contains(&block.id) {
            return Ok(out);
        }
        out.added = self.store(block, arrival, false)?;
        for id in out.added.clone() {
            self.consider(id, &mut out);
        }
        Ok(out)
    }

    /// Stores a block that fork choice ignores until released.
    pub fn insert_withheld(&mut self, block: Arc<Block>, arrival: Round) -> Result<(), BlockRejection> {
        if self.contains(&block.id) {
            return Ok(());
        }
        self.store(block, arrival, true).map(|_| ())
    }

    /// Makes every withheld block visible to fork choice.
    pub fn release_withheld(&mut self) -> Inserted {
        let mut released: Vec<Digest> = self
            .blocks
            .iter_mut()
            .filter(|(_, e)| e.withheld)
            .map(|(id, e)| {
                e.withheld = false;
                *id
            })
            .collect();
        released.sort_by_key(|id| (self.blocks[id].block.height, *id));
        let mut out = Inserted { added: released.clone(), ..Default::default() };
        for id in released {
            self.consider(id, &mut out);
        }
        out
    }

    /// Marks `id` and its ancestors final. Returns whether the finalized
    /// height advanced.
    pub fn finalize(&mut self, id: &Digest) -> Result<bool, AnchorConflict> {
        let height = match self.blocks.get(id) {
            Some(e) => e.block.height,
            None => return Err(AnchorConflict { block: *id, anchor_height: self.finalized.height }),
        };
        let anchor = self.anchor();
        if height <= anchor.height {
            return if self.ancestor_at(&anchor.id, height) == Some(*id) {
                Ok(false)
            } else {
                Err(AnchorConflict { block: *id, anchor_height: anchor.height })
            };
        }
        if !self.descends_from(id, &anchor) {
            return Err(AnchorConflict { block: *id, anchor_height: anchor.height });
        }
        self.finalized = Anchor { height, id: *id };
        if !self.eligible(&self.tip) {
            self.tip = fork_choice(self, self.tie_break);
        }
        Ok(true)
    }

    /// Freezes the tip-path block `depth` below the tip. Returns the new
    /// frozen anchor when it advanced.
    pub fn freeze(&mut self, depth: u64) -> Option<Anchor> {
        let tip_height = self.tip_height();
        if depth == 0 || tip_height < depth {
            return None;
        }
        let height = tip_height - depth;
        if height <= self.frozen.height {
            return None;
        }
        let id = self.ancestor_at(&self.tip, height)?;
        self.frozen = Anchor { height, id };
        Some(self.frozen)
    }
}

struct PathIter<'a> {
    view: &'a ChainView,
    next: Option<Digest>,
}

impl<'a> Iterator for PathIter<'a> {
    type Item = &'a Arc<Block>;

    fn next(&mut self) -> Option<Self::Item> {
        let id = self.next?;
        let entry = self.view.blocks.get(&id)?;
        self.next = if entry.block.is_genesis() { None } else { Some(entry.block.parent_id) };
        Some(&entry.block)
    }
}

/// Recomputes the tip from scratch: the highest visible block consistent
/// with the finalized and frozen prefix, ties broken by `tie_break`.
pub fn fork_choice(view: &ChainView, tie_break: TieBreak) -> Digest {
    let mut best: Option<&Entry> = None;
    for (id, e) in &view.blocks {
        if e.withheld || !view.eligible(id) {
            continue;
        }
        best = match best {
            Some(b) if !key_better(tie_break, e, b) => Some(b),
            _ => Some(e),
        };
    }
    best.map(|e| e.block.id).unwrap_or(view.tip)
}

fn key_better(tie_break: TieBreak, a: &Entry, b: &Entry) -> bool {
    use std::cmp::Ordering::*;
    match a.block.height.cmp(&b.block.height) {
        Greater => true,
        Less => false,
        Equal => match tie_break {
            TieBreak::FirstSeen => match a.arrival.cmp(&b.arrival) {
                Less => true,
                Greater => false,
                Equal => a.block.id < b.block.id,
            },
            TieBreak::SmallestDigest => a.block.id < b.block.id,
        },
    }
}

/// Length-prefixed concatenation of canonical block encodings.
pub fn serialize_prefix(blocks: &[Arc<Block>]) -> Vec<u8> {
    let mut enc = Encoder::new();
    for b in blocks {
        enc.bytes(&b.to_bytes());
    }
    enc.finish()
}

pub fn prefix_digest(blocks: &[Arc<Block>]) -> Digest {
    let mut w = DigestWriter::new();
    for b in blocks {
        let bytes = b.to_bytes();
        w.update(&(bytes.len() as u32).to_le_bytes());
        w.update(&bytes);
    }
    w.finish()
}

/// Digest of the genesis..=`up_to_height` prefix of the tip path.
pub fn chain_digest(view: &ChainView, up_to_height: u64) -> Result<Digest, HeightOutOfRange> {
    let tip = view.tip_height();
    if up_to_height > tip {
        return Err(HeightOutOfRange { requested: up_to_height, tip });
    }
    let path = view.tip_path();
    Ok(prefix_digest(&path[..=up_to_height as usize]))
}

/// Position of a record on the current tip path. Records that only appear
/// on abandoned branches are not reported.
pub fn locate_record(view: &ChainView, record_id: &str) -> Option<(Digest, u64)> {
    view.find_record(record_id).map(|(b, _)| (b.id, b.height))
}
