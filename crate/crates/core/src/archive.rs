//! Snapshots, commitments on an append-only bulletin, multi-archivist
//! comparison and record resolution for a fresh verifier.
//!
//! Snapshot file layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "CESNAP01"
//! archivist u32
//! round     u64
//! height    u64
//! digest    32 bytes   claimed prefix digest
//! then, until end of file, one entry per block from genesis upward:
//!   len u32, canonical block bytes
//! ```

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{prefix_digest, validate_block, Anchor, Block, ChainView, Record};
use crate::codec::{DecodeError, Decoder, Encoder};
use crate::consensus::ConsensusRule;
use crate::digest::Digest;
use crate::ids::{NodeId, Round};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"CESNAP01";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("height {requested} exceeds settled height {settled}")]
    HeightExceedsSettled { requested: u64, settled: u64 },
    #[error("malformed snapshot: {0}")]
    Decode(#[from] DecodeError),
    #[error("malformed bulletin: {0}")]
    Bulletin(#[from] serde_json::Error),
    #[error("malformed bulletin: {0}")]
    BulletinIndex(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub archivist: NodeId,
    pub taken_round: Round,
    pub height: u64,
    /// Genesis first.
    pub blocks: Vec<Arc<Block>>,
    pub digest: Digest,
}

impl Snapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw(SNAPSHOT_MAGIC)
            .u32(self.archivist.0)
            .u64(self.taken_round)
            .u64(self.height)
            .digest(&self.digest);
        for b in &self.blocks {
            enc.bytes(&b.to_bytes());
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        if dec.raw(8)? != SNAPSHOT_MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let archivist = NodeId(dec.u32()?);
        let taken_round = dec.u64()?;
        let height = dec.u64()?;
        let digest = dec.digest()?;
        let mut blocks = Vec::new();
        while !dec.is_empty() {
            blocks.push(Arc::new(Block::from_bytes(dec.bytes()?)?));
        }
        Ok(Snapshot { archivist, taken_round, height, blocks, digest })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }

    pub fn find_record(&self, record_id: &str) -> Option<&Record> {
        self.blocks.iter().rev().find_map(|b| b.record(record_id))
    }

    /// True when one snapshot's blocks are a prefix of the other's.
    pub fn compatible(&self, other: &Snapshot) -> bool {
        self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.id == b.id)
    }
}

/// Snapshot of the tip-path prefix up to `up_to_height`, which must be
/// settled under `rule`.
pub fn snapshot_chain(
    view: &ChainView,
    rule: &ConsensusRule,
    up_to_height: u64,
    archivist: NodeId,
    round: Round,
) -> Result<Snapshot, ArchiveError> {
    let settled = rule.settled_height(view);
    if up_to_height > settled {
        return Err(ArchiveError::HeightExceedsSettled { requested: up_to_height, settled });
    }
    let mut blocks = view.tip_path();
    blocks.truncate(up_to_height as usize + 1);
    let digest = prefix_digest(&blocks);
    Ok(Snapshot { archivist, taken_round: round, height: up_to_height, blocks, digest })
}

/// Replays block validation over the prefix. `Err(h)` names the first
/// failing height.
pub fn internal_consistency_check(snapshot: &Snapshot) -> Result<(), u64> {
    let Some(first) = snapshot.blocks.first() else {
        return Err(0);
    };
    if first.height != 0 || first.parent_id != Digest::ZERO || first.compute_id() != first.id {
        return Err(0);
    }
    let mut view = ChainView::with_genesis(snapshot.archivist, first.clone());
    for (i, b) in snapshot.blocks.iter().enumerate().skip(1) {
        let h = i as u64;
        if b.height != h || b.parent_id != snapshot.blocks[i - 1].id {
            return Err(h);
        }
        if validate_block(b, &view).is_err() || view.insert(b.clone(), 0).is_err() {
            return Err(h);
        }
    }
    if snapshot.blocks.len() as u64 != snapshot.height + 1 {
        return Err(snapshot.blocks.len() as u64);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commitment {
    pub digest: Digest,
    pub taken_round: Round,
    pub publisher: NodeId,
    pub index: u64,
}

/// Append-only public registry of snapshot digests.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bulletin {
    entries: Vec<Commitment>,
}

impl Bulletin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&mut self, digest: Digest, taken_round: Round, publisher: NodeId) -> Commitment {
        let c = Commitment { digest, taken_round, publisher, index: self.entries.len() as u64 };
        self.entries.push(c);
        c
    }

    pub fn entries(&self) -> &[Commitment] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, digest: &Digest) -> Option<&Commitment> {
        self.entries.iter().find(|c| c.digest == *digest)
    }

    /// Rebuilds a bulletin from a list, rejecting gaps in the indices.
    pub fn from_entries(entries: Vec<Commitment>) -> Result<Self, String> {
        for (i, c) in entries.iter().enumerate() {
            if c.index != i as u64 {
                return Err(format!("entry {i} carries index {}", c.index));
            }
        }
        Ok(Bulletin { entries })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("commitments serialize")
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let entries: Vec<Commitment> = serde_json::from_slice(&std::fs::read(path)?)?;
        Bulletin::from_entries(entries).map_err(ArchiveError::BulletinIndex)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotVerdict {
    Authentic,
    Tampered,
    Uncommitted,
}

impl SnapshotVerdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            SnapshotVerdict::Authentic => "authentic",
            SnapshotVerdict::Tampered => "tampered",
            SnapshotVerdict::Uncommitted => "uncommitted",
        }
    }
}

pub fn verify_snapshot(snapshot: &Snapshot, bulletin: &Bulletin) -> SnapshotVerdict {
    let consistent =
        internal_consistency_check(snapshot).is_ok() && prefix_digest(&snapshot.blocks) == snapshot.digest;
    match (consistent, bulletin.lookup(&snapshot.digest).is_some()) {
        (false, _) => SnapshotVerdict::Tampered,
        (true, true) => SnapshotVerdict::Authentic,
        (true, false) => SnapshotVerdict::Uncommitted,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveComparison {
    Consistent,
    DivergentResolvable,
    DivergentUnresolvable,
}

impl ArchiveComparison {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchiveComparison::Consistent => "consistent",
            ArchiveComparison::DivergentResolvable => "divergent_resolvable",
            ArchiveComparison::DivergentUnresolvable => "divergent_unresolvable",
        }
    }
}

/// Maximal sets of pairwise prefix-compatible snapshots, as index lists.
pub fn compatible_groups(snapshots: &[Snapshot]) -> Vec<Vec<usize>> {
    let n = snapshots.len();
    let ok = |i: usize, j: usize| snapshots[i].compatible(&snapshots[j]);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    // Bron–Kerbosch without pivoting; archive sets are small.
    fn extend(r: Vec<usize>, p: Vec<usize>, x: Vec<usize>, ok: &dyn Fn(usize, usize) -> bool, out: &mut Vec<Vec<usize>>) {
        if p.is_empty() && x.is_empty() {
            out.push(r);
            return;
        }
        let (mut p, mut x) = (p, x);
        while let Some(v) = p.first().copied() {
            let mut r2 = r.clone();
            r2.push(v);
            let p2 = p.iter().copied().filter(|&u| u != v && ok(u, v)).collect();
            let x2 = x.iter().copied().filter(|&u| ok(u, v)).collect();
            extend(r2, p2, x2, ok, out);
            p.remove(0);
            x.push(v);
        }
    }
    extend(Vec::new(), (0..n).collect(), Vec::new(), &ok, &mut groups);
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort();
    groups
}

/// `bulletin = None` models a withheld or unreachable bulletin.
pub fn compare_archives(snapshots: &[Snapshot], bulletin: Option<&Bulletin>) -> ArchiveComparison {
    let groups = compatible_groups(snapshots);
    if groups.len() <= 1 {
        return ArchiveComparison::Consistent;
    }
    let authentic: Vec<bool> = snapshots
        .iter()
        .map(|s| bulletin.is_some_and(|b| verify_snapshot(s, b) == SnapshotVerdict::Authentic))
        .collect();
    let committed = groups.iter().filter(|g| g.iter().any(|&i| authentic[i])).count();
    if committed == 1 {
        ArchiveComparison::DivergentResolvable
    } else {
        ArchiveComparison::DivergentUnresolvable
    }
}

/// What a fresh verifier can learn from one live node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LiveView {
    pub node: NodeId,
    pub tip: Digest,
    pub finalized: Anchor,
}

impl LiveView {
    pub fn of(view: &ChainView) -> Self {
        LiveView { node: view.owner(), tip: view.tip(), finalized: view.finalized() }
    }
}

/// The chain a protocol-faithful newcomer would adopt.
#[derive(Clone, Debug)]
pub struct ResolvedChain {
    pub path: Vec<Arc<Block>>,
}

impl ResolvedChain {
    pub fn tip(&self) -> &Arc<Block> {
        self.path.last().expect("path holds genesis")
    }

    pub fn record(&self, record_id: &str) -> Option<&Record> {
        self.path.iter().rev().find_map(|b| b.record(record_id))
    }
}

fn path_in(store: &HashMap<Digest, Arc<Block>>, tip: &Digest) -> Option<Vec<Arc<Block>>> {
    let mut path = Vec::new();
    let mut cur = store.get(tip)?.clone();
    loop {
        let parent = cur.parent_id;
        let done = cur.is_genesis();
        path.push(cur);
        if done {
            break;
        }
        cur = store.get(&parent)?.clone();
    }
    path.reverse();
    Some(path)
}

/// Asks every live node for its tip and finalized anchor, keeps the tips
/// consistent with the highest anchor and follows the highest one (ties
/// to the smallest digest). `None` when nobody answers.
pub fn fresh_verifier(store: &HashMap<Digest, Arc<Block>>, live: &[LiveView]) -> Option<ResolvedChain> {
    let anchor = live.iter().map(|l| l.finalized).max_by_key(|a| (a.height, std::cmp::Reverse(a.id)))?;
    let mut best: Option<Vec<Arc<Block>>> = None;
    for l in live {
        let Some(path) = path_in(store, &l.tip) else { continue };
        let consistent = anchor.height == 0
            || path.get(anchor.height as usize).is_some_and(|b| b.id == anchor.id);
        if !consistent {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => {
                let (t, bt) = (path.last().unwrap(), b.last().unwrap());
                t.height > bt.height || (t.height == bt.height && t.id < bt.id)
            }
        };
        if better {
            best = Some(path);
        }
    }
    let path = match best {
        Some(p) => p,
        None => path_in(store, &anchor.id)?,
    };
    Some(ResolvedChain { path })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPolicy {
    /// Live network only.
    Naive,
    /// Bulletin-authenticated archives first, then the live network.
    ArchiveAware,
}

/// Resolves a record id to its bytes, or `None` when unresolved.
pub fn resolve_query(
    record_id: &str,
    store: &HashMap<Digest, Arc<Block>>,
    live: &[LiveView],
    archives: &[Snapshot],
    bulletin: Option<&Bulletin>,
    policy: QueryPolicy,
) -> Option<Vec<u8>> {
    if policy == QueryPolicy::ArchiveAware {
        if let Some(bulletin) = bulletin {
            let mut authentic: Vec<(&Snapshot, u64)> = archives
                .iter()
                .filter(|s| verify_snapshot(s, bulletin) == SnapshotVerdict::Authentic)
                .map(|s| (s, bulletin.lookup(&s.digest).unwrap().index))
                .collect();
            authentic.sort_by_key(|(_, idx)| *idx);
            if let Some(rec) = authentic.iter().find_map(|(s, _)| s.find_record(record_id)) {
                return Some(rec.body.clone());
            }
        }
    }
    fresh_verifier(store, live)?.record(record_id).map(|r| r.body.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{genesis, Marker};

    fn grow(from: &[Arc<Block>], n: u64, producer: u32, tag: &str) -> Vec<Arc<Block>> {
        let mut out = from.to_vec();
        for _ in 0..n {
            let p = out.last().unwrap().clone();
            let h = p.height + 1;
            out.push(Arc::new(Block::new(
                p.id,
                h,
                NodeId(producer),
                h,
                vec![Record::data(format!("rec-{h}"), format!("{tag}{h}").into_bytes())],
                Marker::Normal,
            )));
        }
        out
    }

    fn snap(blocks: &[Arc<Block>], who: u32) -> Snapshot {
        Snapshot {
            archivist: NodeId(who),
            taken_round: 9,
            height: blocks.len() as u64 - 1,
            blocks: blocks.to_vec(),
            digest: prefix_digest(blocks),
        }
    }

    fn honest(n: u64) -> Vec<Arc<Block>> {
        grow(&[genesis()], n, 1, "h")
    }

    fn view_of(blocks: &[Arc<Block>]) -> ChainView {
        ChainView::from_prefix(NodeId(0), blocks, 0)
    }

    #[test]
    fn snapshot_respects_settled_height() {
        let chain = honest(14);
        let v = view_of(&chain);
        let rule = ConsensusRule::unstable(6);
        let s = snapshot_chain(&v, &rule, 8, NodeId(0), 20).unwrap();
        assert_eq!(s.blocks.len(), 9);
        assert_eq!(s.digest, crate::chain::chain_digest(&v, 8).unwrap());
        assert!(matches!(
            snapshot_chain(&v, &rule, 10, NodeId(0), 20),
            Err(ArchiveError::HeightExceedsSettled { requested: 10, settled: 8 })
        ));
        let t = snapshot_chain(&view_of(&chain), &rule, 8, NodeId(0), 20).unwrap();
        assert_eq!(s.to_bytes(), t.to_bytes());
    }

    #[test]
    fn snapshot_file_round_trips() {
        let s = snap(&honest(5), 3);
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..8], SNAPSHOT_MAGIC);
        assert_eq!(Snapshot::from_bytes(&bytes).unwrap(), s);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Snapshot::from_bytes(&bad), Err(DecodeError::BadMagic)));
    }

    #[test]
    fn verify_cases() {
        let s = snap(&honest(6), 0);
        let mut b = Bulletin::new();
        assert_eq!(verify_snapshot(&s, &b), SnapshotVerdict::Uncommitted);
        b.publish(s.digest, 9, NodeId(0));
        assert_eq!(verify_snapshot(&s, &b), SnapshotVerdict::Authentic);

        let mut t = s.clone();
        let mut blk = (*t.blocks[3]).clone();
        blk.records[0].body[0] ^= 1;
        t.blocks[3] = Arc::new(blk);
        assert_eq!(verify_snapshot(&t, &b), SnapshotVerdict::Tampered);

        let forged = snap(&grow(&honest(2), 4, 9, "forged:"), 9);
        assert_eq!(internal_consistency_check(&forged), Ok(()));
        assert_eq!(verify_snapshot(&forged, &b), SnapshotVerdict::Uncommitted);
    }

    #[test]
    fn consistency_check_names_failing_height() {
        let chain = honest(6);
        assert_eq!(internal_consistency_check(&snap(&chain, 0)), Ok(()));

        let mut rewired = chain.clone();
        let mut b3 = (*rewired[3]).clone();
        b3.parent_id = rewired[1].id;
        b3.id = b3.compute_id();
        rewired[3] = Arc::new(b3);
        assert_eq!(internal_consistency_check(&snap(&rewired, 0)), Err(3));

        let mut mutated = chain.clone();
        let mut b2 = (*mutated[2]).clone();
        b2.records[0].body = b"other".to_vec();
        mutated[2] = Arc::new(b2);
        assert_eq!(internal_consistency_check(&snap(&mutated, 0)), Err(2));
    }

    #[test]
    fn comparison_classes() {
        let base = honest(6);
        let a = snap(&base, 0);
        assert_eq!(compare_archives(&[a.clone(), a.clone(), a.clone()], None), ArchiveComparison::Consistent);
        // a shorter honest prefix is compatible
        assert_eq!(compare_archives(&[a.clone(), snap(&base[..4], 1)], None), ArchiveComparison::Consistent);

        let forged = snap(&grow(&base[..3], 6, 9, "forged:"), 9);
        let mut b = Bulletin::new();
        b.publish(a.digest, 9, NodeId(0));
        let pair = [a.clone(), forged.clone()];
        assert_eq!(compare_archives(&pair, Some(&b)), ArchiveComparison::DivergentResolvable);
        assert_eq!(compare_archives(&pair, None), ArchiveComparison::DivergentUnresolvable);
        assert_eq!(compare_archives(&pair, Some(&Bulletin::new())), ArchiveComparison::DivergentUnresolvable);
        b.publish(forged.digest, 9, NodeId(9));
        assert_eq!(compare_archives(&pair, Some(&b)), ArchiveComparison::DivergentUnresolvable);
    }

    #[test]
    fn fresh_verifier_and_policies() {
        let original = honest(10);
        let forged = grow(&original[..4], 10, 9, "forged:");
        let mut store = HashMap::new();
        for b in original.iter().chain(&forged) {
            store.insert(b.id, b.clone());
        }
        let attacker = LiveView { node: NodeId(9), tip: forged.last().unwrap().id, finalized: Anchor { height: 0, id: genesis().id } };
        let archive = snap(&original[..8], 0);
        let mut bulletin = Bulletin::new();
        bulletin.publish(archive.digest, 9, NodeId(0));
        let live = [attacker];
        let q = |p, b: Option<&Bulletin>| resolve_query("rec-6", &store, &live, std::slice::from_ref(&archive), b, p);
        assert_eq!(q(QueryPolicy::Naive, Some(&bulletin)), Some(b"forged:6".to_vec()));
        assert_eq!(q(QueryPolicy::ArchiveAware, Some(&bulletin)), Some(b"h6".to_vec()));
        assert_eq!(q(QueryPolicy::ArchiveAware, None), q(QueryPolicy::Naive, None));

        // a finalized anchor on the original chain excludes the forgery
        let fin = Anchor { height: 6, id: original[6].id };
        let honest_live = LiveView { node: NodeId(0), tip: original[8].id, finalized: fin };
        let r = fresh_verifier(&store, &[attacker, honest_live]).unwrap();
        assert_eq!(r.tip().id, original[8].id);
        assert!(fresh_verifier(&store, &[]).is_none());
    }
}
