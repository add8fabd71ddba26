//! Deterministic round-based kernel.
//!
//! Each round runs, in order: delivery of last round's messages (with the
//! suppressions in force when they were sent), the freeze rule, shutdown
//! start-of-round hooks, community update, fee influx, strategy decisions,
//! one producer lottery per chain, in-round committee finalization on
//! stable chains, shutdown steps, status broadcast, analyzers and the
//! metrics row.

pub mod events;
pub mod metrics;
pub mod replay;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::archive::{snapshot_chain, Bulletin, LiveView, Snapshot};
use crate::chain::{genesis, prefix_digest, Anchor, Block, ChainView, Inserted, Marker, Record, RecordKind};
use crate::community::{thickness, Community, CommunitySnapshot, Disposition, Override, ThicknessReport};
use crate::consensus::{
    confirmation_status, elect_producer, finalize_step, Confirmation, ConsensusRule, Finality, FinalityLedger, Mode,
};
use crate::digest::Digest;
use crate::ids::{ChainId, NodeId, Round, Weight};
use crate::rng::RngStream;
use crate::scenario::Scenario;
use crate::shutdown::{evaluate_good_ending, GoodEndingVerdict, Procedure, VerdictInputs};
use crate::strategies::{
    decide_action, ActionSet, ApprovalPolicy, AttackPhase, Directive, NodeContext, ProduceOn, StrategySpec,
    StrategyState, Suppression,
};

pub use events::{event_log_digest, EventData, EventLog, SimEvent};
pub use metrics::MetricsRow;

/// Body of the data record that arrives in `round`.
pub fn record_body(seed: u64, round: Round) -> Vec<u8> {
    format!("record {round} of run {seed}").into_bytes()
}

pub fn record_id(round: Round) -> String {
    format!("rec-{round}")
}

pub const FORGED_PREFIX: &[u8] = b"forged:";

#[derive(Clone, Debug)]
enum Msg {
    Block(Digest),
    Status { tip: Digest, finalized: Anchor },
}

#[derive(Clone, Debug)]
struct Envelope {
    from: NodeId,
    to: NodeId,
    msg: Msg,
}

#[derive(Clone, Debug, Default)]
struct Outbox {
    envelopes: Vec<Envelope>,
    suppressions: Vec<Suppression>,
}

#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: NodeId,
    pub weight: Weight,
    pub chain: ChainId,
    pub view: ChainView,
    pub strategy: StrategyState,
    pub ever_active: bool,
}

#[derive(Clone, Debug)]
struct ChainState {
    rule: ConsensusRule,
    ledger: FinalityLedger,
    rng: RngStream,
    fee_pool: f64,
    /// Honest producers append the final block from this round on.
    final_from: Option<Round>,
    final_block: Option<Digest>,
    displaced_logged: bool,
}

impl ChainState {
    fn new(rule: ConsensusRule, seed: u64, chain: ChainId) -> Self {
        ChainState {
            rule,
            ledger: FinalityLedger::default(),
            rng: RngStream::derive(seed, None, &format!("elect/{chain}")),
            fee_pool: 0.0,
            final_from: None,
            final_block: None,
            displaced_logged: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HardForkOutcome {
    Activated { chain: ChainId, round: Round, fork_height: u64, fork_point: Digest, redirect: Digest },
    Failed { round: Round },
}

/// Thickness of the set of nodes actually willing to produce in a round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductionSample {
    pub round: Round,
    pub willing_weight: Weight,
    pub produced: bool,
    pub membership_thin: bool,
    pub production_thin: bool,
}

#[derive(Default)]
struct Log {
    events: Vec<SimEvent>,
    seq: u32,
}

impl Log {
    fn emit(&mut self, round: Round, data: EventData) {
        self.events.push(SimEvent { round, seq: self.seq, data });
        self.seq += 1;
    }
}

pub struct SimResult {
    pub scenario_json: String,
    pub seed: u64,
    pub events: Vec<SimEvent>,
    pub metrics: Vec<MetricsRow>,
    pub views: BTreeMap<NodeId, ChainView>,
    pub active: BTreeSet<NodeId>,
    pub verdict: GoodEndingVerdict,
    pub digest: Digest,
    pub snapshots: Vec<Snapshot>,
    pub bulletin: Bulletin,
    pub bulletin_reachable: bool,
    pub hard_fork: Option<HardForkOutcome>,
    pub production: Vec<ProductionSample>,
    /// Every block produced in the run, private ones included, plus genesis.
    pub blocks: HashMap<Digest, Arc<Block>>,
    pub reference_node: Option<NodeId>,
    pub reference_path: Vec<Arc<Block>>,
    pub live: Vec<LiveView>,
}

impl SimResult {
    pub fn event_log(&self) -> EventLog {
        EventLog { scenario_json: self.scenario_json.clone(), seed: self.seed, events: self.events.clone() }
    }

    pub fn count(&self, kind: &str) -> usize {
        self.events.iter().filter(|e| e.data.kind() == kind).count()
    }

    pub fn rewrite_succeeded(&self) -> bool {
        self.count("fork_published") > 0
    }

    pub fn permanent_split(&self) -> Option<&Vec<(Anchor, Vec<NodeId>)>> {
        self.events.iter().find_map(|e| match &e.data {
            EventData::PermanentSplit { groups } => Some(groups),
            _ => None,
        })
    }

    pub fn first_lumpy_round(&self) -> Option<Round> {
        self.metrics.iter().find(|m| m.lumpy == 1).map(|m| m.round)
    }
}

pub struct Simulation {
    scenario: Arc<Scenario>,
    seed: u64,
    round: Round,
    community: Community,
    nodes: BTreeMap<NodeId, NodeState>,
    chains: BTreeMap<ChainId, ChainState>,
    public: HashMap<Digest, Arc<Block>>,
    all: HashMap<Digest, Arc<Block>>,
    churn_rng: RngStream,
    outbox: Outbox,
    log: Log,
    metrics: Vec<MetricsRow>,
    production: Vec<ProductionSample>,
    last_mode: Option<Mode>,
    honest_cost: BTreeMap<Round, (u64, u64)>,
    honest_cost_cum: u64,
    depart_next: BTreeSet<NodeId>,
    signals: BTreeSet<NodeId>,
    signalling: bool,
    hard_fork: Option<HardForkOutcome>,
    bulletin: Bulletin,
    snapshots: Vec<Snapshot>,
    reference: Option<(Option<NodeId>, Vec<Arc<Block>>)>,
    blocks_this_round: u64,
}

impl Simulation {
    pub fn new(scenario: Arc<Scenario>, seed: u64) -> Self {
        let community = Community::new(scenario.universe.clone(), scenario.file.churn.clone());
        let nodes = scenario
            .universe
            .nodes()
            .iter()
            .map(|n| {
                let state = NodeState {
                    id: n.id,
                    weight: n.weight,
                    chain: 0,
                    view: ChainView::new(n.id),
                    strategy: StrategyState::new(n.strategy.clone()),
                    ever_active: false,
                };
                (n.id, state)
            })
            .collect();
        let mut chain0 = ChainState::new(scenario.consensus(), seed, 0);
        if scenario.plan.procedure == Procedure::FinalBlock {
            chain0.final_from = Some(scenario.plan.trigger_round);
        }
        let g = genesis();
        let mut public = HashMap::new();
        public.insert(g.id, g.clone());
        Simulation {
            seed,
            round: 0,
            community,
            nodes,
            chains: BTreeMap::from([(0, chain0)]),
            all: public.clone(),
            public,
            churn_rng: RngStream::derive(seed, None, "churn"),
            outbox: Outbox::default(),
            log: Log::default(),
            metrics: Vec::new(),
            production: Vec::new(),
            last_mode: None,
            honest_cost: BTreeMap::new(),
            honest_cost_cum: 0,
            depart_next: BTreeSet::new(),
            signals: BTreeSet::new(),
            signalling: false,
            hard_fork: None,
            bulletin: Bulletin::new(),
            snapshots: Vec::new(),
            reference: None,
            blocks_this_round: 0,
            scenario,
        }
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn is_done(&self) -> bool {
        self.round >= self.scenario.horizon()
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.log.events
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeState> {
        self.nodes.get(&id)
    }

    pub fn community(&self) -> &Community {
        &self.community
    }

    fn honest(&self, id: NodeId) -> bool {
        self.community.disposition(id) == Some(Disposition::Honest)
    }

    fn active_on(&self, chain: ChainId) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.chain == chain && self.community.is_active(n.id))
            .map(|n| n.id)
            .collect()
    }

    fn add_cost(&mut self, round: Round, blocks: u64, messages: u64) {
        let e = self.honest_cost.entry(round).or_default();
        e.0 += blocks;
        e.1 += messages;
        self.honest_cost_cum += blocks + messages;
    }

    /// Runs one round.
    pub fn step(&mut self) {
        let r = self.round;
        self.log.seq = 0;
        let mut traffic = (0u64, 0u64);

        let outbox = std::mem::take(&mut self.outbox);
        self.deliver(r, outbox, &mut traffic);

        if let Some(d) = self.scenario.plan.freeze_depth {
            for id in self.nodes.keys().copied().collect::<Vec<_>>() {
                if self.community.is_active(id) && self.honest(id) {
                    crate::shutdown::apply_freeze_rule(&mut self.nodes.get_mut(&id).unwrap().view, d);
                }
            }
        }

        self.shutdown_start(r);

        let mut overrides = BTreeMap::new();
        for id in std::mem::take(&mut self.depart_next) {
            if self.honest(id) {
                overrides.insert(id, Override::Depart);
            }
        }
        for spec in self.scenario.universe.nodes() {
            if let StrategySpec::LateDominator(p) = &spec.strategy {
                if spec.join_round.is_none() && p.attack_start_round == r {
                    overrides.insert(spec.id, Override::Join);
                }
            }
        }
        let (_, changes) = self.community.advance(r, &mut self.churn_rng, &overrides);
        for c in changes {
            if c.joined {
                self.nodes.get_mut(&c.node).unwrap().ever_active = true;
                self.log.emit(r, EventData::NodeJoined { node: c.node });
            } else {
                self.log.emit(r, EventData::NodeLeft { node: c.node });
            }
        }
        if !overrides.is_empty() {
            let departed: Vec<String> = overrides
                .iter()
                .filter(|(_, o)| **o == Override::Depart)
                .map(|(id, _)| id.to_string())
                .collect();
            if !departed.is_empty() {
                self.log.emit(r, EventData::ShutdownStep { step: "depart".into(), detail: departed.join(",") });
            }
        }
        let fees = self.scenario.file.fees_per_round;
        for c in self.chains.values_mut() {
            c.fee_pool += fees;
        }

        // decisions read the state left by delivery and membership update
        let mut decisions: BTreeMap<NodeId, ActionSet> = BTreeMap::new();
        let directive = self.directives(r);
        for id in self.nodes.keys().copied().collect::<Vec<_>>() {
            if !self.community.is_active(id) {
                continue;
            }
            let chain = self.nodes[&id].chain;
            let active_weight: Weight =
                self.active_on(chain).iter().map(|n| self.nodes[n].weight).sum();
            let disposition = self.community.disposition(id).unwrap();
            let node = self.nodes.get_mut(&id).unwrap();
            let ctx = NodeContext {
                node: id,
                weight: node.weight,
                disposition,
                view: &node.view,
                round: r,
                mempool_fees: self.chains[&chain].fee_pool,
                active_weight,
                directive: directive.get(&id).copied().unwrap_or_default(),
            };
            let acts = decide_action(&ctx, &mut node.strategy);
            if acts.defected {
                self.community.set_disposition(id, Disposition::Dishonest);
                self.log.emit(r, EventData::Defection { node: id });
            }
            if acts.signal_adoption {
                self.signals.insert(id);
            }
            if let Some(s) = &acts.suppress {
                self.outbox.suppressions.push(s.clone());
            }
            if acts.publish_fork {
                self.publish(id, r);
            }
            decisions.insert(id, acts);
        }

        let chain_ids: Vec<ChainId> = self.chains.keys().copied().collect();
        for c in chain_ids {
            let willing: Vec<(NodeId, Weight)> = decisions
                .iter()
                .filter(|(id, a)| a.produce.is_some() && self.nodes[*id].chain == c)
                .map(|(id, _)| (*id, self.nodes[id].weight))
                .collect();
            let producer = elect_producer(&willing, &mut self.chains.get_mut(&c).unwrap().rng);
            if c == 0 {
                self.sample_production(r, &willing, producer.is_some());
            }
            let Some(p) = producer else { continue };
            match decisions[&p].produce.unwrap() {
                ProduceOn::Tip(parent) => {
                    let block = self.produce_public(p, parent, r, c);
                    if self.chains[&c].rule.is_stable() {
                        self.committee(c, &block, r, &decisions);
                    }
                }
                ProduceOn::Private(parent) => {
                    self.produce_private(p, parent, r, c);
                    if self.nodes[&p].strategy.should_publish(&self.nodes[&p].view) {
                        self.publish(p, r);
                    }
                }
            }
            self.chains.get_mut(&c).unwrap().fee_pool = 0.0;
        }

        self.shutdown_end(r);

        for id in self.nodes.keys().copied().collect::<Vec<_>>() {
            if !self.community.is_active(id) {
                continue;
            }
            let node = &self.nodes[&id];
            let status = Msg::Status { tip: node.view.tip(), finalized: node.view.finalized() };
            for to in self.active_on(node.chain) {
                if to != id {
                    self.outbox.envelopes.push(Envelope { from: id, to, msg: status.clone() });
                }
            }
            traffic.1 += 1;
            if self.honest(id) {
                traffic.0 += 1;
            }
        }
        self.add_cost(r, 0, traffic.0);
        self.log.emit(r, EventData::Traffic { honest_messages: traffic.0, total_messages: traffic.1 });

        let produced = std::mem::take(&mut self.blocks_this_round);
        self.analyze(r, produced);

        if r == self.scenario.plan.reference_round() {
            self.capture_reference();
        }
        self.round += 1;
    }

    fn directives(&self, r: Round) -> BTreeMap<NodeId, Directive> {
        let mut out = BTreeMap::new();
        if self.signalling {
            for id in self.nodes.keys() {
                if self.community.is_active(*id) && !self.scenario.plan.non_adopters.contains(id) {
                    out.insert(*id, Directive { depart: false, signal_adoption: true });
                }
            }
        }
        let _ = r;
        out
    }

    fn emit_tip_change(log: &mut Log, r: Round, view: &ChainView, change: Option<(Digest, Digest)>) {
        let Some((old, new)) = change else { return };
        if old == new {
            return;
        }
        let new_height = view.get(&new).map_or(0, |b| b.height);
        let old_height = view.get(&old).map_or(0, |b| b.height);
        let mut h = old_height.min(new_height);
        let (mut a, mut b) = (view.ancestor_at(&old, h), view.ancestor_at(&new, h));
        while a != b && h > 0 {
            h -= 1;
            a = view.ancestor_at(&old, h);
            b = view.ancestor_at(&new, h);
        }
        log.emit(
            r,
            EventData::TipChanged { node: view.owner(), old, new, height: new_height, reorg_depth: old_height - h },
        );
    }

    fn note_insert(log: &mut Log, r: Round, view: &ChainView, ins: &Inserted) {
        Self::emit_tip_change(log, r, view, ins.tip_change);
        for b in &ins.blocked {
            log.emit(r, EventData::FreezeConflict { node: view.owner(), block: *b, frozen_height: view.anchor().height });
        }
    }

    /// Pulls `target` and its missing ancestors from the network. Returns
    /// the number of blocks transferred.
    fn sync(&mut self, r: Round, to: NodeId, target: Digest) -> u64 {
        let node = self.nodes.get_mut(&to).unwrap();
        let mut missing = Vec::new();
        let mut cur = target;
        while !node.view.contains(&cur) {
            let Some(b) = self.public.get(&cur) else { break };
            missing.push(b.clone());
            cur = b.parent_id;
        }
        let n = missing.len() as u64;
        for b in missing.into_iter().rev() {
            if let Ok(ins) = node.view.insert(b, r) {
                Self::note_insert(&mut self.log, r, &node.view, &ins);
            }
        }
        n
    }

    fn deliver(&mut self, r: Round, outbox: Outbox, traffic: &mut (u64, u64)) {
        let mut dropped: BTreeMap<(NodeId, NodeId, NodeId), u32> = BTreeMap::new();
        for env in outbox.envelopes {
            if !self.community.is_active(env.to) || self.nodes[&env.to].chain != self.nodes[&env.from].chain {
                continue;
            }
            if let Some(s) = outbox.suppressions.iter().find(|s| s.drops(env.from, env.to)) {
                *dropped.entry((s.by, env.from, env.to)).or_default() += 1;
                continue;
            }
            let served = match env.msg {
                Msg::Block(id) => self.sync(r, env.to, id).saturating_sub(1),
                Msg::Status { tip, finalized } => {
                    let n = self.sync(r, env.to, tip);
                    self.accept_finality(r, env.to, finalized);
                    n
                }
            };
            traffic.1 += served;
            if self.honest(env.from) {
                traffic.0 += served;
            }
        }
        for ((by, from, to), n) in dropped {
            self.log.emit(r, EventData::Suppression { by, from, to, dropped: n });
        }
    }

    /// Adopts a finalized anchor reported by a peer when the chain's
    /// finality ledger certifies it.
    fn accept_finality(&mut self, r: Round, to: NodeId, anchor: Anchor) {
        let chain = self.nodes[&to].chain;
        let certified = self.chains[&chain].ledger.get(anchor.height) == Some(anchor.id);
        let node = self.nodes.get_mut(&to).unwrap();
        if !certified || anchor.height <= node.view.finalized_height() || !node.view.contains(&anchor.id) {
            return;
        }
        let before = node.view.tip();
        if let Ok(true) = node.view.finalize(&anchor.id) {
            self.log.emit(r, EventData::Finalized { node: to, id: anchor.id, height: anchor.height });
            Self::emit_tip_change(&mut self.log, r, &node.view, Some((before, node.view.tip())));
        }
    }

    fn compose(&self, producer: NodeId, parent: &Block, view: &ChainView, r: Round, chain: ChainId) -> (Vec<Record>, Marker) {
        let closed = view.path_back_from(&parent.id).any(|b| b.is_final());
        if closed {
            return (Vec::new(), Marker::Normal);
        }
        let honest = self.honest(producer);
        let mut records: Vec<Record> = (parent.round + 1..=r)
            .filter(|q| *q >= 1)
            .map(|q| Record::data(record_id(q), record_body(self.seed, q)))
            .collect();
        if honest && chain == 0 && !self.signals.is_empty() {
            let on_chain: BTreeSet<String> = view
                .path_back_from(&parent.id)
                .flat_map(|b| b.records.iter())
                .filter(|rec| rec.kind == RecordKind::AdoptionSignal)
                .map(|rec| rec.record_id.clone())
                .collect();
            for id in &self.signals {
                let rid = format!("adopt-{id}");
                if !on_chain.contains(&rid) {
                    records.push(Record::new(rid, RecordKind::AdoptionSignal, id.0.to_le_bytes().to_vec()));
                }
            }
        }
        let cs = &self.chains[&chain];
        if honest && cs.final_from.is_some_and(|t| r >= t) {
            let payload = match self.bulletin.entries().last() {
                Some(c) => c.digest,
                None => prefix_digest(&view.path_to(&parent.id)),
            };
            records.push(Record::new("final-marker", RecordKind::FinalMarkerPayload, payload.0.to_vec()));
            return (records, Marker::Final);
        }
        (records, Marker::Normal)
    }

    fn record_block(&mut self, r: Round, producer: NodeId, chain: ChainId, private: bool, block: &Arc<Block>) {
        let honest = self.honest(producer);
        self.all.insert(block.id, block.clone());
        if !private {
            self.public.insert(block.id, block.clone());
        }
        if honest {
            self.add_cost(r, 1, 0);
        }
        self.blocks_this_round += 1;
        self.log.emit(r, EventData::BlockProduced { producer, chain, honest, private, block: block.clone() });
    }

    fn produce_public(&mut self, p: NodeId, parent: Digest, r: Round, c: ChainId) -> Arc<Block> {
        let view = &self.nodes[&p].view;
        let parent = view.get(&parent).expect("producer extends a block it holds").clone();
        let (records, marker) = self.compose(p, &parent, view, r, c);
        let block = Arc::new(Block::new(parent.id, parent.height + 1, p, r, records, marker));
        self.record_block(r, p, c, false, &block);
        if block.is_final() {
            let cs = self.chains.get_mut(&c).unwrap();
            if cs.final_block.is_none() {
                cs.final_block = Some(block.id);
                self.log.emit(r, EventData::ShutdownStep { step: "final_block".into(), detail: block.id.to_hex() });
            }
        }
        let node = self.nodes.get_mut(&p).unwrap();
        if let Ok(ins) = node.view.insert(block.clone(), r) {
            Self::note_insert(&mut self.log, r, &node.view, &ins);
        }
        for to in self.active_on(c) {
            if to != p {
                self.outbox.envelopes.push(Envelope { from: p, to, msg: Msg::Block(block.id) });
            }
        }
        block
    }

    /// Extends the private fork. Records mirror the public block at the
    /// same height with forged bodies, so the fork rewrites history.
    fn produce_private(&mut self, p: NodeId, parent: Digest, r: Round, c: ChainId) {
        let view = &self.nodes[&p].view;
        let parent = view.get(&parent).expect("private parent held").clone();
        let height = parent.height + 1;
        let public = view.ancestor_at(&view.tip(), height).filter(|_| height <= view.tip_height());
        let records = match public.and_then(|id| view.get(&id)) {
            Some(b) if !b.records.is_empty() => b
                .records
                .iter()
                .map(|rec| {
                    let mut body = FORGED_PREFIX.to_vec();
                    body.extend_from_slice(&rec.body);
                    Record::new(rec.record_id.clone(), rec.kind, body)
                })
                .collect(),
            _ => (parent.round + 1..=r)
                .filter(|q| *q >= 1)
                .map(|q| Record::data(record_id(q), record_body(self.seed, q)))
                .collect(),
        };
        let block = Arc::new(Block::new(parent.id, height, p, r, records, Marker::Normal));
        self.record_block(r, p, c, true, &block);
        let node = self.nodes.get_mut(&p).unwrap();
        node.view.insert_withheld(block.clone(), r).expect("private block extends held parent");
        node.strategy.extend_private(block.id, height);
    }

    fn publish(&mut self, id: NodeId, r: Round) {
        let node = self.nodes.get_mut(&id).unwrap();
        let Some((base, tip)) = node.strategy.mark_published() else { return };
        let ins = node.view.release_withheld();
        Self::note_insert(&mut self.log, r, &node.view, &ins);
        let fork: Vec<Arc<Block>> = node.view.path_back_from(&tip).take_while(|b| b.id != base).cloned().collect();
        let height = node.view.get(&tip).map_or(0, |b| b.height);
        let chain = node.chain;
        let victims = match node.strategy.spec() {
            StrategySpec::RewriteAttacker(p) | StrategySpec::LateDominator(p) => p.victims.clone(),
            _ => Vec::new(),
        };
        for b in fork {
            self.public.insert(b.id, b);
        }
        self.log.emit(r, EventData::ForkPublished { node: id, base, tip, height, victims });
        for to in self.active_on(chain) {
            if to != id {
                self.outbox.envelopes.push(Envelope { from: id, to, msg: Msg::Block(tip) });
            }
        }
    }

    /// Synchronous approval round for a stable-chain proposal.
    fn committee(&mut self, c: ChainId, block: &Arc<Block>, r: Round, decisions: &BTreeMap<NodeId, ActionSet>) {
        let producer_honest = self.honest(block.producer);
        let members = self.active_on(c);
        let mut approvals = Vec::new();
        for id in &members {
            let node = &self.nodes[id];
            let approve = match decisions.get(id).map(|a| a.approve) {
                Some(ApprovalPolicy::Honest) => {
                    node.view.contains(&block.parent_id) && node.view.descends_from(&block.parent_id, &node.view.finalized())
                }
                Some(ApprovalPolicy::Collude) => !producer_honest,
                None => false,
            };
            if approve {
                approvals.push((*id, node.weight));
            }
        }
        let active_weight: Weight = members.iter().map(|id| self.nodes[id].weight).sum();
        let quorum = self.chains[&c].rule.quorum().expect("stable chain");
        let ledger = &mut self.chains.get_mut(&c).unwrap().ledger;
        match finalize_step(quorum, block, &approvals, active_weight, ledger) {
            Ok(Finality::Finalized) => {
                for (id, _) in approvals {
                    let node = self.nodes.get_mut(&id).unwrap();
                    if let Ok(ins) = node.view.insert(block.clone(), r) {
                        Self::note_insert(&mut self.log, r, &node.view, &ins);
                    }
                    let before = node.view.tip();
                    if let Ok(true) = node.view.finalize(&block.id) {
                        self.log.emit(r, EventData::Finalized { node: id, id: block.id, height: block.height });
                        Self::emit_tip_change(&mut self.log, r, &node.view, Some((before, node.view.tip())));
                    }
                }
            }
            Ok(Finality::Pending) => {}
            Err(v) => self.log.emit(
                r,
                EventData::SafetyViolation { height: v.height, existing: v.existing, conflicting: v.conflicting },
            ),
        }
    }

    fn shutdown_start(&mut self, r: Round) {
        let plan = &self.scenario.plan;
        let archive = match plan.procedure {
            Procedure::AbandonAndArchive => true,
            Procedure::FinalBlock => !plan.archivists.is_empty(),
            _ => false,
        };
        if archive && r == plan.trigger_round {
            self.archive(r);
        }
    }

    fn archive(&mut self, r: Round) {
        let plan = &self.scenario.plan;
        let archivists: Vec<NodeId> = if plan.archivists.is_empty() {
            self.nodes.keys().copied().filter(|id| self.community.is_active(*id) && self.honest(*id)).collect()
        } else {
            plan.archivists.clone()
        };
        for a in archivists {
            let node = &self.nodes[&a];
            let rule = self.chains[&node.chain].rule;
            let height = rule.settled_height(&node.view);
            let snap = snapshot_chain(&node.view, &rule, height, a, r).expect("settled height is archivable");
            self.log.emit(r, EventData::SnapshotTaken { archivist: a, height, digest: snap.digest });
            let c = self.bulletin.publish(snap.digest, r, a);
            self.log.emit(r, EventData::CommitmentPublished { index: c.index, digest: c.digest, publisher: a });
            self.snapshots.push(snap);
        }
    }

    fn shutdown_end(&mut self, r: Round) {
        let plan = self.scenario.plan.clone();
        match plan.procedure {
            Procedure::AbandonAndArchive if r == plan.trigger_round => {
                for id in self.nodes.keys().copied().collect::<Vec<_>>() {
                    if self.community.is_active(id) && self.honest(id) {
                        self.depart_next.insert(id);
                    }
                }
            }
            Procedure::HardForkToStable if r >= plan.trigger_round => self.hard_fork_step(r),
            _ => {}
        }
        for c in self.chains.keys().copied().collect::<Vec<_>>() {
            self.final_block_step(c, r);
        }
    }

    fn final_block_step(&mut self, c: ChainId, r: Round) {
        let cs = &self.chains[&c];
        if !cs.final_from.is_some_and(|t| r >= t) {
            return;
        }
        let rule = cs.rule;
        let mut leaving = Vec::new();
        for id in self.active_on(c) {
            let view = &self.nodes[&id].view;
            let Some(fb) = view.path_back_from(&view.tip()).find(|b| b.is_final()) else { continue };
            let done = match rule {
                ConsensusRule::Unstable { confirmation_depth } => {
                    confirmation_status(view, &fb.id, confirmation_depth) == Confirmation::Confirmed
                }
                ConsensusRule::Stable { .. } => view.finalized_height() >= fb.height,
            };
            if done && self.honest(id) {
                leaving.push(id);
            }
        }
        self.depart_next.extend(leaving);
        let cs = &self.chains[&c];
        if let (Some(fb), false) = (cs.final_block, cs.displaced_logged) {
            let displaced = self.active_on(c).into_iter().find(|id| {
                let v = &self.nodes[id].view;
                v.contains(&fb) && !v.is_on_tip_path(&fb)
            });
            if let Some(id) = displaced {
                self.chains.get_mut(&c).unwrap().displaced_logged = true;
                self.log.emit(r, EventData::ShutdownStep { step: "final_block_displaced".into(), detail: id.to_string() });
            }
        }
    }

    fn hard_fork_step(&mut self, r: Round) {
        if self.hard_fork.is_some() {
            return;
        }
        let plan = self.scenario.plan.clone();
        if r >= plan.trigger_round + plan.adoption_window() {
            self.signalling = false;
            self.hard_fork = Some(HardForkOutcome::Failed { round: r });
            self.log.emit(r, EventData::ShutdownStep { step: "adoption_window_expired".into(), detail: String::new() });
            return;
        }
        if !self.signalling {
            self.signalling = true;
            self.log.emit(r, EventData::ShutdownStep { step: "adoption_signalling".into(), detail: String::new() });
        }
        let active0 = self.active_on(0);
        let Some(coordinator) = active0
            .iter()
            .copied()
            .find(|id| self.honest(*id) && !plan.non_adopters.contains(id))
        else {
            return;
        };
        let view = &self.nodes[&coordinator].view;
        let k = self.chains[&0].rule.confirmation_depth().unwrap_or(0);
        let Some(settled) = view.tip_height().checked_sub(k) else { return };
        let path = view.tip_path();
        let prefix: Vec<Arc<Block>> = path[..=settled as usize].to_vec();
        let signers: BTreeSet<NodeId> = prefix
            .iter()
            .flat_map(|b| b.records.iter())
            .filter(|rec| rec.kind == RecordKind::AdoptionSignal)
            .filter_map(|rec| <[u8; 4]>::try_from(rec.body.as_slice()).ok().map(|b| NodeId(u32::from_le_bytes(b))))
            .filter(|id| active0.contains(id))
            .collect();
        let weight: Weight = signers.iter().map(|id| self.nodes[id].weight).sum();
        let total: Weight = active0.iter().map(|id| self.nodes[id].weight).sum();
        if total == 0 || (weight as f64) + 1e-9 < plan.adoption_threshold() * total as f64 {
            return;
        }
        self.activate_fork(r, coordinator, prefix, &signers);
    }

    fn activate_fork(&mut self, r: Round, coordinator: NodeId, prefix: Vec<Arc<Block>>, signers: &BTreeSet<NodeId>) {
        let plan = self.scenario.plan.clone();
        let fork_point = prefix.last().unwrap().clone();
        let redirect = Arc::new(Block::new(
            fork_point.id,
            fork_point.height + 1,
            coordinator,
            r,
            vec![Record::new(
                "redirect",
                RecordKind::Redirect,
                format!("chain 1 continues from {} at height {}", fork_point.id, fork_point.height).into_bytes(),
            )],
            Marker::Normal,
        ));
        let mut chain1 = ChainState::new(ConsensusRule::stable(plan.new_quorum()), self.seed, 1);
        chain1.final_from = Some(r + 1);
        self.chains.insert(1, chain1);
        self.signalling = false;
        self.record_block(r, coordinator, 1, false, &redirect);

        let adopters: Vec<NodeId> = signers
            .iter()
            .copied()
            .filter(|id| self.honest(*id) && !plan.non_adopters.contains(id) && self.community.is_active(*id))
            .collect();
        let approvals: Vec<(NodeId, Weight)> = adopters.iter().map(|id| (*id, self.nodes[id].weight)).collect();
        let total: Weight = approvals.iter().map(|(_, w)| w).sum();
        let quorum = plan.new_quorum();
        let ledger = &mut self.chains.get_mut(&1).unwrap().ledger;
        let certified = matches!(finalize_step(quorum, &redirect, &approvals, total, ledger), Ok(Finality::Finalized));
        for id in &adopters {
            let node = self.nodes.get_mut(id).unwrap();
            let old = node.view.tip();
            node.chain = 1;
            node.view = ChainView::from_prefix(*id, &prefix, r);
            node.view.insert(redirect.clone(), r).expect("redirect extends the fork point");
            self.log.emit(r, EventData::ChainSwitch { node: *id, chain: 1 });
            Self::emit_tip_change(&mut self.log, r, &node.view, Some((old, node.view.tip())));
            if certified && node.view.finalize(&redirect.id) == Ok(true) {
                self.log.emit(r, EventData::Finalized { node: *id, id: redirect.id, height: redirect.height });
            }
        }
        self.log.emit(
            r,
            EventData::ShutdownStep {
                step: "hard_fork_activated".into(),
                detail: format!("fork height {}, {} adopters", fork_point.height, adopters.len()),
            },
        );
        self.hard_fork = Some(HardForkOutcome::Activated {
            chain: 1,
            round: r,
            fork_height: fork_point.height,
            fork_point: fork_point.id,
            redirect: redirect.id,
        });
    }

    fn sample_production(&mut self, r: Round, willing: &[(NodeId, Weight)], produced: bool) {
        let u = &self.scenario.universe;
        let rule = self.chains[&0].rule;
        let sf = self.scenario.file.analyzers.safety_factor;
        let members = self.community.snapshot(r);
        let willing_snap = CommunitySnapshot::from_members(
            r,
            willing.iter().map(|(id, w)| (*id, *w, self.community.disposition(*id).unwrap())),
        );
        self.production.push(ProductionSample {
            round: r,
            willing_weight: willing.iter().map(|(_, w)| w).sum(),
            produced,
            membership_thin: thickness(u, &members, &rule, sf).is_thin(),
            production_thin: thickness(u, &willing_snap, &rule, sf).is_thin(),
        });
    }

    fn analyze(&mut self, r: Round, blocks_this_round: u64) {
        let snap = self.community.snapshot(r);
        let rule = self.chains[&0].rule;
        let report: ThicknessReport =
            thickness(&self.scenario.universe, &snap, &rule, self.scenario.file.analyzers.safety_factor);
        if self.last_mode != Some(report.mode.mode) {
            self.last_mode = Some(report.mode.mode);
            self.log.emit(
                r,
                EventData::ModeChanged {
                    mode: report.mode.mode,
                    honest_weight: snap.honest_weight,
                    dishonest_weight: snap.dishonest_weight,
                },
            );
        }
        if !r.is_multiple_of(self.scenario.file.analyzers.sample_every) {
            return;
        }
        let active: Vec<&NodeState> = self.nodes.values().filter(|n| self.community.is_active(n.id)).collect();
        self.metrics.push(MetricsRow {
            round: r,
            mode: report.mode.mode,
            honest_weight: snap.honest_weight,
            dishonest_weight: snap.dishonest_weight,
            lumpy: report.lumpiness.lumpy as u8,
            thin: report.is_thin() as u8,
            margin_to_flip: report.mode.margin_f64(),
            tip_height: active.iter().map(|n| n.view.tip_height()).max().unwrap_or(0),
            finalized_height: active.iter().map(|n| n.view.finalized_height()).max().unwrap_or(0),
            blocks_this_round,
            honest_cost_cum: self.honest_cost_cum,
        });
    }

    /// Reference node: the lowest-id node that was honest from the start,
    /// still is, and has taken part.
    fn capture_reference(&mut self) {
        let node = self.scenario.universe.nodes().iter().find(|spec| {
            spec.disposition == Disposition::Honest && self.honest(spec.id) && self.nodes[&spec.id].ever_active
        });
        self.reference = Some(match node {
            Some(spec) => (Some(spec.id), self.nodes[&spec.id].view.tip_path()),
            None => (None, Vec::new()),
        });
    }

    fn frozen_split(&mut self, r: Round) {
        if self.scenario.plan.freeze_depth.is_none() {
            return;
        }
        let mut groups: BTreeMap<(u64, Digest), Vec<NodeId>> = BTreeMap::new();
        for n in self.nodes.values() {
            if self.community.is_active(n.id) && self.honest(n.id) {
                let a = n.view.frozen();
                groups.entry((a.height, a.id)).or_default().push(n.id);
            }
        }
        let anchors: Vec<Anchor> = groups.keys().map(|(height, id)| Anchor { height: *height, id: *id }).collect();
        let descends = |hi: &Anchor, lo: &Anchor| {
            let mut cur = self.all.get(&hi.id);
            while let Some(b) = cur {
                if b.height == lo.height {
                    return b.id == lo.id;
                }
                cur = self.all.get(&b.parent_id);
            }
            false
        };
        let split = anchors.iter().enumerate().any(|(i, a)| {
            anchors[i + 1..].iter().any(|b| {
                let (lo, hi) = if a.height <= b.height { (a, b) } else { (b, a) };
                !descends(hi, lo)
            })
        });
        if split {
            let groups = groups.into_iter().map(|((height, id), ids)| (Anchor { height, id }, ids)).collect();
            self.log.emit(r, EventData::PermanentSplit { groups });
        }
    }

    /// Closes the run: split detection, verdict, digest.
    pub fn finish(mut self) -> SimResult {
        let horizon = self.scenario.horizon();
        self.log.seq = 0;
        self.frozen_split(horizon);
        if self.reference.is_none() {
            self.capture_reference();
        }
        let active: BTreeSet<NodeId> =
            self.nodes.keys().copied().filter(|id| self.community.is_active(*id)).collect();
        let live = live_views(&self.nodes, &active);
        let (reference_node, reference_path) = self.reference.take().unwrap();
        let verdict = evaluate_good_ending(&VerdictInputs {
            plan: &self.scenario.plan,
            reference_node,
            reference_path: reference_path.clone(),
            store: &self.all,
            live: live.clone(),
            honest_cost: &self.honest_cost,
        });
        let digest = event_log_digest(&self.log.events);
        SimResult {
            scenario_json: self.scenario.to_json(),
            seed: self.seed,
            events: self.log.events,
            metrics: self.metrics,
            views: self.nodes.into_iter().map(|(id, n)| (id, n.view)).collect(),
            active,
            verdict,
            digest,
            snapshots: self.snapshots,
            bulletin: self.bulletin,
            bulletin_reachable: self.scenario.plan.bulletin_reachable,
            hard_fork: self.hard_fork,
            production: self.production,
            blocks: self.all,
            reference_node,
            reference_path,
            live,
        }
    }

    pub fn attack_phase(&self, id: NodeId) -> Option<AttackPhase> {
        self.nodes.get(&id).map(|n| n.strategy.attack_phase())
    }
}

/// Live nodes answer a fresh verifier; when nobody is live, the retired
/// copies held by former participants stand in.
fn live_views(nodes: &BTreeMap<NodeId, NodeState>, active: &BTreeSet<NodeId>) -> Vec<LiveView> {
    let live: Vec<LiveView> = active.iter().map(|id| LiveView::of(&nodes[id].view)).collect();
    if !live.is_empty() {
        return live;
    }
    nodes.values().filter(|n| n.ever_active).map(|n| LiveView::of(&n.view)).collect()
}

/// Runs `scenario` for `seed` from round 0 to the horizon.
pub fn run(scenario: &Scenario, seed: u64) -> SimResult {
    run_shared(Arc::new(scenario.clone()), seed)
}

pub fn run_shared(scenario: Arc<Scenario>, seed: u64) -> SimResult {
    let mut sim = Simulation::new(scenario, seed);
    while !sim.is_done() {
        sim.step();
    }
    sim.finish()
}
