//! Rebuilds metrics and the good-ending verdict from an event log alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::archive::LiveView;
use crate::chain::{genesis, Anchor, Block};
use crate::community::{thickness, CommunitySnapshot, Disposition};
use crate::digest::Digest;
use crate::engine::events::{EventData, EventLog};
use crate::engine::metrics::MetricsRow;
use crate::ids::{NodeId, Round};
use crate::scenario::{Scenario, ScenarioError};
use crate::shutdown::{evaluate_good_ending, GoodEndingVerdict, VerdictInputs};

pub struct Replay {
    pub scenario: Scenario,
    pub seed: u64,
    pub metrics: Vec<MetricsRow>,
    pub verdict: GoodEndingVerdict,
    pub digest: Digest,
}

#[derive(Clone, Copy)]
struct NodeTrack {
    tip: Digest,
    tip_height: u64,
    finalized: Anchor,
    ever_active: bool,
}

pub fn replay(log: &EventLog) -> Result<Replay, ScenarioError> {
    let scenario = Scenario::from_json(&log.scenario_json)?;
    let universe = &scenario.universe;
    let rule = scenario.consensus();
    let plan = &scenario.plan;
    let sf = scenario.file.analyzers.safety_factor;
    let sample_every = scenario.file.analyzers.sample_every;

    let g = genesis();
    let genesis_anchor = Anchor { height: 0, id: g.id };
    let mut store: HashMap<Digest, Arc<Block>> = HashMap::from([(g.id, g.clone())]);
    let mut nodes: BTreeMap<NodeId, NodeTrack> = universe
        .nodes()
        .iter()
        .map(|n| (n.id, NodeTrack { tip: g.id, tip_height: 0, finalized: genesis_anchor, ever_active: false }))
        .collect();
    let mut disposition: BTreeMap<NodeId, Disposition> =
        universe.nodes().iter().map(|n| (n.id, n.disposition)).collect();
    let mut active: BTreeSet<NodeId> = BTreeSet::new();
    let mut honest_cost: BTreeMap<Round, (u64, u64)> = BTreeMap::new();
    let mut cum = 0u64;
    let mut metrics = Vec::new();
    let mut reference: Option<(Option<NodeId>, Digest)> = None;

    let reference_of = |nodes: &BTreeMap<NodeId, NodeTrack>, disposition: &BTreeMap<NodeId, Disposition>| {
        universe
            .nodes()
            .iter()
            .find(|s| {
                s.disposition == Disposition::Honest
                    && disposition[&s.id] == Disposition::Honest
                    && nodes[&s.id].ever_active
            })
            .map(|s| (Some(s.id), nodes[&s.id].tip))
            .unwrap_or((None, Digest::ZERO))
    };

    let mut events = log.events.iter().peekable();
    for r in 0..scenario.horizon() {
        let mut blocks = 0u64;
        while let Some(e) = events.next_if(|e| e.round == r) {
            match &e.data {
                EventData::BlockProduced { honest, block, .. } => {
                    store.insert(block.id, block.clone());
                    blocks += 1;
                    if *honest {
                        honest_cost.entry(r).or_default().0 += 1;
                        cum += 1;
                    }
                }
                EventData::TipChanged { node, new, height, .. } => {
                    let t = nodes.get_mut(node).unwrap();
                    t.tip = *new;
                    t.tip_height = *height;
                }
                EventData::Finalized { node, id, height } => {
                    nodes.get_mut(node).unwrap().finalized = Anchor { height: *height, id: *id };
                }
                EventData::ChainSwitch { node, .. } => {
                    nodes.get_mut(node).unwrap().finalized = genesis_anchor;
                }
                EventData::NodeJoined { node } => {
                    active.insert(*node);
                    nodes.get_mut(node).unwrap().ever_active = true;
                }
                EventData::NodeLeft { node } => {
                    active.remove(node);
                }
                EventData::Defection { node } => {
                    disposition.insert(*node, Disposition::Dishonest);
                }
                EventData::Traffic { honest_messages, .. } => {
                    honest_cost.entry(r).or_default().1 += honest_messages;
                    cum += honest_messages;
                }
                _ => {}
            }
        }
        if r % sample_every == 0 {
            let snap = CommunitySnapshot::from_members(
                r,
                active.iter().map(|id| (*id, universe.get(*id).unwrap().weight, disposition[id])),
            );
            let report = thickness(universe, &snap, &rule, sf);
            metrics.push(MetricsRow {
                round: r,
                mode: report.mode.mode,
                honest_weight: snap.honest_weight,
                dishonest_weight: snap.dishonest_weight,
                lumpy: report.lumpiness.lumpy as u8,
                thin: report.is_thin() as u8,
                margin_to_flip: report.mode.margin_f64(),
                tip_height: active.iter().map(|id| nodes[id].tip_height).max().unwrap_or(0),
                finalized_height: active.iter().map(|id| nodes[id].finalized.height).max().unwrap_or(0),
                blocks_this_round: blocks,
                honest_cost_cum: cum,
            });
        }
        if r == plan.reference_round() {
            reference = Some(reference_of(&nodes, &disposition));
        }
    }
    let (reference_node, reference_tip) = reference.unwrap_or_else(|| reference_of(&nodes, &disposition));
    let reference_path = match reference_node {
        Some(_) => path(&store, reference_tip),
        None => Vec::new(),
    };
    let mut live: Vec<LiveView> = active
        .iter()
        .map(|id| LiveView { node: *id, tip: nodes[id].tip, finalized: nodes[id].finalized })
        .collect();
    if live.is_empty() {
        live = nodes
            .iter()
            .filter(|(_, t)| t.ever_active)
            .map(|(id, t)| LiveView { node: *id, tip: t.tip, finalized: t.finalized })
            .collect();
    }
    let verdict = evaluate_good_ending(&VerdictInputs {
        plan,
        reference_node,
        reference_path,
        store: &store,
        live,
        honest_cost: &honest_cost,
    });
    Ok(Replay { seed: log.seed, digest: log.digest(), scenario, metrics, verdict })
}

fn path(store: &HashMap<Digest, Arc<Block>>, tip: Digest) -> Vec<Arc<Block>> {
    let mut out = Vec::new();
    let mut cur = store.get(&tip);
    while let Some(b) = cur {
        out.push(b.clone());
        cur = if b.is_genesis() { None } else { store.get(&b.parent_id) };
    }
    out.reverse();
    out
}
