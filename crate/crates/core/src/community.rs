//! Universe vs. community membership over time, churn schedules, and the
//! smooth/lumpy and thick/thin analyzers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::consensus::{mode_predicate, ConsensusRule, ModeState};
use crate::ids::{NodeId, Round, Weight};
use crate::rng::RngStream;
use crate::strategies::StrategySpec;

pub const DEFAULT_SAFETY_FACTOR: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Honest,
    Dishonest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub weight: Weight,
    pub disposition: Disposition,
    pub strategy: StrategySpec,
    pub join_round: Option<Round>,
    pub leave_round: Option<Round>,
}

impl NodeSpec {
    pub fn new(id: u32, weight: Weight, disposition: Disposition, strategy: StrategySpec) -> Self {
        NodeSpec { id: NodeId(id), weight, disposition, strategy, join_round: None, leave_round: None }
    }

    pub fn honest(id: u32, weight: Weight) -> Self {
        Self::new(id, weight, Disposition::Honest, StrategySpec::HonestDefault)
    }

    pub fn with_window(mut self, join: Option<Round>, leave: Option<Round>) -> Self {
        self.join_round = join;
        self.leave_round = leave;
        self
    }

    fn membership(&self) -> Membership {
        if matches!(self.strategy, StrategySpec::LateDominator(_)) && self.join_round.is_none() {
            Membership::OverrideOnly
        } else if self.join_round.is_some() || self.leave_round.is_some() {
            Membership::Explicit
        } else {
            Membership::ScheduleFree
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Membership {
    Explicit,
    OverrideOnly,
    ScheduleFree,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Universe {
    nodes: Vec<NodeSpec>,
}

impl Universe {
    /// Nodes are kept sorted by id; ids must be unique.
    pub fn new(mut nodes: Vec<NodeSpec>) -> Result<Self, NodeId> {
        nodes.sort_by_key(|n| n.id);
        if let Some(w) = nodes.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(w[0].id);
        }
        Ok(Universe { nodes })
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn get(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok().map(|i| &self.nodes[i])
    }

    pub fn max_weight(&self) -> Weight {
        self.nodes.iter().map(|n| n.weight).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommunitySnapshot {
    pub round: Round,
    /// Active members with weight and current disposition.
    pub members: BTreeMap<NodeId, (Weight, Disposition)>,
    pub honest_weight: Weight,
    pub dishonest_weight: Weight,
}

impl CommunitySnapshot {
    pub fn from_members(round: Round, members: impl IntoIterator<Item = (NodeId, Weight, Disposition)>) -> Self {
        let members: BTreeMap<_, _> = members.into_iter().map(|(id, w, d)| (id, (w, d))).collect();
        let (mut honest_weight, mut dishonest_weight) = (0, 0);
        for (w, d) in members.values() {
            match d {
                Disposition::Honest => honest_weight += w,
                Disposition::Dishonest => dishonest_weight += w,
            }
        }
        CommunitySnapshot { round, members, honest_weight, dishonest_weight }
    }

    pub fn is_member(&self, id: NodeId) -> bool {
        self.members.contains_key(&id)
    }

    pub fn active_weight(&self) -> Weight {
        self.honest_weight + self.dishonest_weight
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialMembership {
    /// Schedule-free members start inside the community.
    #[default]
    All,
    /// Schedule-free members start outside and arrive through join phases.
    None,
}

/// Rates are expected counts per round over `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnPhase {
    pub start: Round,
    pub end: Round,
    #[serde(default)]
    pub join_rate: f64,
    #[serde(default)]
    pub leave_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnSchedule {
    #[serde(default)]
    pub initial: InitialMembership,
    #[serde(default)]
    pub phases: Vec<ChurnPhase>,
}

impl ChurnSchedule {
    pub fn phase_at(&self, round: Round) -> Option<&ChurnPhase> {
        self.phases.iter().find(|p| p.start <= round && round < p.end)
    }

    /// Phases must be non-empty intervals, ordered and non-overlapping,
    /// with finite non-negative rates.
    pub fn check(&self) -> Result<(), String> {
        for (i, p) in self.phases.iter().enumerate() {
            if p.start >= p.end {
                return Err(format!("phases[{i}]: start {} must precede end {}", p.start, p.end));
            }
            for (name, r) in [("join_rate", p.join_rate), ("leave_rate", p.leave_rate)] {
                if !r.is_finite() || r < 0.0 {
                    return Err(format!("phases[{i}].{name}: {r} must be a non-negative number"));
                }
            }
            if i > 0 && self.phases[i - 1].end > p.start {
                return Err(format!("phases[{i}]: overlaps or precedes phases[{}]", i - 1));
            }
        }
        Ok(())
    }
}

/// Strategy- or procedure-driven membership changes, applied ahead of
/// schedules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Override {
    /// Leave permanently.
    Depart,
    Join,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MembershipChange {
    pub node: NodeId,
    pub joined: bool,
}

#[derive(Clone, Debug)]
struct MemberState {
    active: bool,
    disposition: Disposition,
    departed: bool,
    forced: bool,
}

/// Membership state machine over rounds.
#[derive(Clone, Debug)]
pub struct Community {
    universe: Universe,
    schedule: ChurnSchedule,
    members: BTreeMap<NodeId, MemberState>,
    last_round: Option<Round>,
}

impl Community {
    pub fn new(universe: Universe, schedule: ChurnSchedule) -> Self {
        let members = universe
            .nodes()
            .iter()
            .map(|n| {
                (n.id, MemberState { active: false, disposition: n.disposition, departed: false, forced: false })
            })
            .collect();
        Community { universe, schedule, members, last_round: None }
    }

    pub fn universe(&self) -> &Universe {
        &self.universe
    }

    pub fn is_active(&self, id: NodeId) -> bool {
        self.members.get(&id).is_some_and(|m| m.active)
    }

    pub fn has_departed(&self, id: NodeId) -> bool {
        self.members.get(&id).is_some_and(|m| m.departed)
    }

    pub fn disposition(&self, id: NodeId) -> Option<Disposition> {
        self.members.get(&id).map(|m| m.disposition)
    }

    pub fn set_disposition(&mut self, id: NodeId, d: Disposition) {
        if let Some(m) = self.members.get_mut(&id) {
            m.disposition = d;
        }
    }

    /// Membership for `round`. Explicit windows are followed exactly,
    /// schedule-free members churn at the phase rates, overrides win.
    pub fn advance(
        &mut self,
        round: Round,
        rng: &mut RngStream,
        overrides: &BTreeMap<NodeId, Override>,
    ) -> (CommunitySnapshot, Vec<MembershipChange>) {
        let before: BTreeMap<NodeId, bool> = self.members.iter().map(|(id, m)| (*id, m.active)).collect();
        let first = self.last_round.is_none();
        self.last_round = Some(round);

        let mut free_active = Vec::new();
        let mut free_idle = Vec::new();
        for spec in self.universe.nodes() {
            let m = self.members.get_mut(&spec.id).unwrap();
            match overrides.get(&spec.id) {
                Some(Override::Depart) => {
                    m.departed = true;
                    m.active = false;
                    continue;
                }
                Some(Override::Join) if !m.departed => {
                    m.active = true;
                    m.forced = true;
                    continue;
                }
                _ => {}
            }
            if m.departed {
                m.active = false;
                continue;
            }
            let past_leave = spec.leave_round.is_some_and(|l| round >= l);
            if m.forced {
                m.active = !past_leave;
                continue;
            }
            match spec.membership() {
                Membership::Explicit => {
                    m.active = spec.join_round.unwrap_or(0) <= round && !past_leave;
                }
                Membership::OverrideOnly => m.active = false,
                Membership::ScheduleFree => {
                    if first && self.schedule.initial == InitialMembership::All {
                        m.active = true;
                    }
                    if m.active {
                        free_active.push(spec.id);
                    } else {
                        free_idle.push(spec.id);
                    }
                }
            }
        }

        if let Some(phase) = self.schedule.phase_at(round).copied() {
            let leaving = rng.realize_rate(phase.leave_rate) as usize;
            for id in pick(&mut free_active, leaving, rng) {
                self.members.get_mut(&id).unwrap().active = false;
            }
            let joining = rng.realize_rate(phase.join_rate) as usize;
            for id in pick(&mut free_idle, joining, rng) {
                self.members.get_mut(&id).unwrap().active = true;
            }
        }

        let changes = self
            .members
            .iter()
            .filter(|(id, m)| before[*id] != m.active)
            .map(|(id, m)| MembershipChange { node: *id, joined: m.active })
            .collect();
        (self.snapshot(round), changes)
    }

    pub fn snapshot(&self, round: Round) -> CommunitySnapshot {
        CommunitySnapshot::from_members(
            round,
            self.universe
                .nodes()
                .iter()
                .filter(|n| self.members[&n.id].active)
                .map(|n| (n.id, n.weight, self.members[&n.id].disposition)),
        )
    }
}

/// Removes up to `n` uniformly chosen ids from `pool` (partial Fisher-Yates).
fn pick(pool: &mut Vec<NodeId>, n: usize, rng: &mut RngStream) -> Vec<NodeId> {
    let n = n.min(pool.len());
    for i in 0..n {
        let j = i + rng.below((pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.drain(..n).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lumpiness {
    pub lumpy: bool,
    /// Smallest id whose membership toggle flips the mode.
    pub witness: Option<NodeId>,
}

/// Exact single-node toggle search over the universe.
pub fn is_lumpy(universe: &Universe, snapshot: &CommunitySnapshot, rule: &ConsensusRule) -> Lumpiness {
    let base = mode_predicate(rule, snapshot.honest_weight, snapshot.dishonest_weight).mode;
    for node in universe.nodes() {
        let (mut h, mut d) = (snapshot.honest_weight, snapshot.dishonest_weight);
        match snapshot.members.get(&node.id) {
            Some((w, Disposition::Honest)) => h -= w,
            Some((w, Disposition::Dishonest)) => d -= w,
            None => match node.disposition {
                Disposition::Honest => h += node.weight,
                Disposition::Dishonest => d += node.weight,
            },
        }
        if mode_predicate(rule, h, d).mode != base {
            return Lumpiness { lumpy: true, witness: Some(node.id) };
        }
    }
    Lumpiness { lumpy: false, witness: None }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Thickness {
    Thick,
    Thin,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThicknessReport {
    pub thickness: Thickness,
    pub lumpiness: Lumpiness,
    pub mode: ModeState,
    pub max_weight: Weight,
}

impl ThicknessReport {
    pub fn is_thin(&self) -> bool {
        self.thickness == Thickness::Thin
    }
}

/// Thin iff lumpy or `margin_to_flip <= safety_factor * max universe weight`.
pub fn thickness(
    universe: &Universe,
    snapshot: &CommunitySnapshot,
    rule: &ConsensusRule,
    safety_factor: f64,
) -> ThicknessReport {
    let lumpiness = is_lumpy(universe, snapshot, rule);
    let mode = mode_predicate(rule, snapshot.honest_weight, snapshot.dishonest_weight);
    let max_weight = universe.max_weight();
    let at_risk = {
        let m = mode.margin_to_flip;
        *m.numer() as f64 <= safety_factor * max_weight as f64 * *m.denom() as f64
    };
    let thickness = if lumpiness.lumpy || at_risk { Thickness::Thin } else { Thickness::Thick };
    ThicknessReport { thickness, lumpiness, mode, max_weight }
}
