//! Per-round node behavior: honest production, private-fork rewriting,
//! message suppression, fee waiting, defection and late domination.

use serde::{Deserialize, Serialize};

use crate::chain::ChainView;
use crate::community::Disposition;
use crate::digest::Digest;
use crate::ids::{NodeId, Round, Weight};

pub const DEFAULT_DEFECT_THRESHOLD: f64 = 0.33;
pub const DEFAULT_REWRITE_DEPTH: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    HonestDefault,
    RewriteAttacker,
    Suppressor,
    FeeWaiter,
    Defector,
    LateDominator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackParams {
    /// First round in which the private fork may start.
    pub attack_start_round: Round,
    /// Height of the public block the private fork branches from.
    pub target_height: u64,
    /// When non-empty the fork is published only to these nodes, which are
    /// also cut off from everyone but the attacker.
    pub victims: Vec<NodeId>,
    /// Length of the eclipse counted from the start of the attack;
    /// `None` keeps it until the horizon.
    pub suppress_rounds: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StrategySpec {
    HonestDefault,
    RewriteAttacker(AttackParams),
    Suppressor { victims: Vec<NodeId>, start_round: Round, rounds: Option<u64> },
    FeeWaiter { fee_threshold: f64 },
    Defector { defect_threshold: f64, rewrite_depth: u64 },
    LateDominator(AttackParams),
}

impl StrategySpec {
    pub fn id(&self) -> StrategyId {
        match self {
            StrategySpec::HonestDefault => StrategyId::HonestDefault,
            StrategySpec::RewriteAttacker(_) => StrategyId::RewriteAttacker,
            StrategySpec::Suppressor { .. } => StrategyId::Suppressor,
            StrategySpec::FeeWaiter { .. } => StrategyId::FeeWaiter,
            StrategySpec::Defector { .. } => StrategyId::Defector,
            StrategySpec::LateDominator(_) => StrategyId::LateDominator,
        }
    }

    fn attack(&self) -> Option<&AttackParams> {
        match self {
            StrategySpec::RewriteAttacker(p) | StrategySpec::LateDominator(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackPhase {
    Waiting,
    Racing { began: Round, fork_base: Digest, private_tip: Digest, private_height: u64 },
    Published { began: Round },
}

#[derive(Clone, Debug)]
pub struct StrategyState {
    origin: StrategyId,
    spec: StrategySpec,
    attack: AttackPhase,
    defected: bool,
}

impl StrategyState {
    pub fn new(spec: StrategySpec) -> Self {
        StrategyState { origin: spec.id(), spec, attack: AttackPhase::Waiting, defected: false }
    }

    pub fn origin(&self) -> StrategyId {
        self.origin
    }

    pub fn current(&self) -> StrategyId {
        self.spec.id()
    }

    pub fn spec(&self) -> &StrategySpec {
        &self.spec
    }

    pub fn attack_phase(&self) -> AttackPhase {
        self.attack
    }

    pub fn has_defected(&self) -> bool {
        self.defected
    }

    pub fn private_tip(&self) -> Option<Digest> {
        match self.attack {
            AttackPhase::Racing { private_tip, .. } => Some(private_tip),
            _ => None,
        }
    }

    /// Records a freshly produced private block on the fork.
    pub fn extend_private(&mut self, id: Digest, height: u64) {
        if let AttackPhase::Racing { private_tip, private_height, .. } = &mut self.attack {
            *private_tip = id;
            *private_height = height;
        }
    }

    /// Publish at a lead of one: the fork is strictly longer than the
    /// public chain in the attacker's own view.
    pub fn should_publish(&self, view: &ChainView) -> bool {
        matches!(self.attack, AttackPhase::Racing { private_height, .. } if private_height > view.tip_height())
    }

    pub fn mark_published(&mut self) -> Option<(Digest, Digest)> {
        if let AttackPhase::Racing { began, fork_base, private_tip, .. } = self.attack {
            self.attack = AttackPhase::Published { began };
            return Some((fork_base, private_tip));
        }
        None
    }
}

/// Shutdown-procedure instructions for honest nodes in a round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Directive {
    pub depart: bool,
    pub signal_adoption: bool,
}

pub struct NodeContext<'a> {
    pub node: NodeId,
    pub weight: Weight,
    pub disposition: Disposition,
    pub view: &'a ChainView,
    pub round: Round,
    pub mempool_fees: f64,
    pub active_weight: Weight,
    pub directive: Directive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProduceOn {
    /// Extend the public fork-choice tip.
    Tip(Digest),
    /// Extend the withheld private fork.
    Private(Digest),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressionMode {
    /// Drop every message to or from a victim.
    Isolate,
    /// Drop messages between victims and anyone but the attacker, and the
    /// attacker's own messages to non-victims.
    Eclipse,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Suppression {
    pub by: NodeId,
    pub victims: Vec<NodeId>,
    pub mode: SuppressionMode,
}

impl Suppression {
    pub fn drops(&self, from: NodeId, to: NodeId) -> bool {
        let v = |n: NodeId| self.victims.contains(&n);
        match self.mode {
            SuppressionMode::Isolate => v(from) || v(to),
            SuppressionMode::Eclipse => {
                (v(from) && to != self.by)
                    || (v(to) && from != self.by)
                    || (from == self.by && !v(to))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApprovalPolicy {
    /// Approve valid proposals that extend the finalized prefix.
    Honest,
    /// Approve only proposals from dishonest producers.
    Collude,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionSet {
    pub produce: Option<ProduceOn>,
    pub withhold: bool,
    pub publish_fork: bool,
    pub suppress: Option<Suppression>,
    pub approve: ApprovalPolicy,
    pub signal_adoption: bool,
    pub depart: bool,
    /// Set in the round a defector switches sides.
    pub defected: bool,
}

impl ActionSet {
    fn idle(disposition: Disposition) -> Self {
        ActionSet {
            produce: None,
            withhold: false,
            publish_fork: false,
            suppress: None,
            approve: match disposition {
                Disposition::Honest => ApprovalPolicy::Honest,
                Disposition::Dishonest => ApprovalPolicy::Collude,
            },
            signal_adoption: false,
            depart: false,
            defected: false,
        }
    }
}

fn in_window(round: Round, start: Round, len: Option<u64>) -> bool {
    round >= start && len.is_none_or(|l| round < start.saturating_add(l))
}

/// Decides one node's actions from the state visible at the start of the
/// round. Mutates only the node's own strategy state.
pub fn decide_action(ctx: &NodeContext<'_>, state: &mut StrategyState) -> ActionSet {
    let mut disposition = ctx.disposition;
    let mut acts = ActionSet::idle(disposition);

    if let StrategySpec::Defector { defect_threshold, rewrite_depth } = state.spec {
        let share = if ctx.active_weight == 0 { 0.0 } else { ctx.weight as f64 / ctx.active_weight as f64 };
        if !state.defected && disposition == Disposition::Honest && share >= defect_threshold {
            state.defected = true;
            state.spec = StrategySpec::RewriteAttacker(AttackParams {
                attack_start_round: ctx.round,
                target_height: ctx.view.tip_height().saturating_sub(rewrite_depth),
                victims: Vec::new(),
                suppress_rounds: None,
            });
            disposition = Disposition::Dishonest;
            acts = ActionSet::idle(disposition);
            acts.defected = true;
        }
    }

    if disposition == Disposition::Honest {
        if ctx.directive.depart {
            acts.depart = true;
            return acts;
        }
        acts.signal_adoption = ctx.directive.signal_adoption;
    }

    let tip = ctx.view.tip();
    match &state.spec {
        StrategySpec::HonestDefault | StrategySpec::Defector { .. } => {
            acts.produce = Some(ProduceOn::Tip(tip));
        }
        StrategySpec::FeeWaiter { fee_threshold } => {
            if ctx.mempool_fees >= *fee_threshold {
                acts.produce = Some(ProduceOn::Tip(tip));
            } else {
                acts.withhold = true;
            }
        }
        StrategySpec::Suppressor { victims, start_round, rounds } => {
            acts.produce = Some(ProduceOn::Tip(tip));
            if in_window(ctx.round, *start_round, *rounds) {
                acts.suppress = Some(Suppression {
                    by: ctx.node,
                    victims: victims.clone(),
                    mode: SuppressionMode::Isolate,
                });
            }
        }
        StrategySpec::RewriteAttacker(_) | StrategySpec::LateDominator(_) => {
            let params = state.spec.attack().cloned().unwrap();
            if state.attack == AttackPhase::Waiting
                && ctx.round >= params.attack_start_round
                && ctx.view.tip_height() >= params.target_height
            {
                let base = ctx.view.ancestor_at(&tip, params.target_height).unwrap_or(tip);
                state.attack = AttackPhase::Racing {
                    began: ctx.round,
                    fork_base: base,
                    private_tip: base,
                    private_height: params.target_height,
                };
            }
            match state.attack {
                AttackPhase::Waiting => acts.produce = Some(ProduceOn::Tip(tip)),
                AttackPhase::Racing { private_tip, .. } => {
                    acts.produce = Some(ProduceOn::Private(private_tip));
                    acts.withhold = true;
                    acts.publish_fork = state.should_publish(ctx.view);
                }
                AttackPhase::Published { .. } => acts.produce = Some(ProduceOn::Tip(tip)),
            }
            let began = match state.attack {
                AttackPhase::Racing { began, .. } | AttackPhase::Published { began } => Some(began),
                AttackPhase::Waiting => None,
            };
            if let Some(began) = began {
                if !params.victims.is_empty() && in_window(ctx.round, began, params.suppress_rounds) {
                    acts.suppress = Some(Suppression {
                        by: ctx.node,
                        victims: params.victims.clone(),
                        mode: SuppressionMode::Eclipse,
                    });
                }
            }
        }
    }
    acts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{genesis, Block, Marker};
    use std::sync::Arc;

    fn linear_view(n: u64) -> ChainView {
        let mut v = ChainView::new(NodeId(0));
        let mut cur = genesis();
        for h in 1..=n {
            let b = Arc::new(Block::new(cur.id, h, NodeId(1), h, vec![], Marker::Normal));
            v.insert(b.clone(), h).unwrap();
            cur = b;
        }
        v
    }

    fn ctx<'a>(view: &'a ChainView, disposition: Disposition) -> NodeContext<'a> {
        NodeContext {
            node: NodeId(0),
            weight: 1,
            disposition,
            view,
            round: 10,
            mempool_fees: 0.0,
            active_weight: 10,
            directive: Directive::default(),
        }
    }

    #[test]
    fn honest_produces_on_tip() {
        let v = linear_view(3);
        let mut s = StrategyState::new(StrategySpec::HonestDefault);
        let a = decide_action(&ctx(&v, Disposition::Honest), &mut s);
        assert_eq!(a.produce, Some(ProduceOn::Tip(v.tip())));
        assert_eq!(a.approve, ApprovalPolicy::Honest);
    }

    #[test]
    fn honest_departs_on_directive() {
        let v = linear_view(3);
        let mut s = StrategyState::new(StrategySpec::HonestDefault);
        let mut c = ctx(&v, Disposition::Honest);
        c.directive.depart = true;
        let a = decide_action(&c, &mut s);
        assert!(a.depart && a.produce.is_none());
    }

    #[test]
    fn fee_waiter_withholds_below_threshold() {
        let v = linear_view(1);
        let mut s = StrategyState::new(StrategySpec::FeeWaiter { fee_threshold: 10.0 });
        let mut c = ctx(&v, Disposition::Honest);
        c.mempool_fees = 5.0;
        let a = decide_action(&c, &mut s);
        assert!(a.withhold && a.produce.is_none());
        c.mempool_fees = 10.0;
        assert!(decide_action(&c, &mut s).produce.is_some());
    }

    #[test]
    fn defector_flips_at_threshold_and_stays() {
        let v = linear_view(4);
        let mut s = StrategyState::new(StrategySpec::Defector { defect_threshold: 0.33, rewrite_depth: 1 });
        let mut c = ctx(&v, Disposition::Honest);
        c.active_weight = 2;
        let a = decide_action(&c, &mut s);
        assert!(a.defected);
        assert_eq!(a.approve, ApprovalPolicy::Collude);
        assert_eq!(s.current(), StrategyId::RewriteAttacker);
        assert!(matches!(a.produce, Some(ProduceOn::Private(_))));
        // the engine now reports the node as dishonest; no second flip
        c.disposition = Disposition::Dishonest;
        c.active_weight = 100;
        let a = decide_action(&c, &mut s);
        assert!(!a.defected);
        assert!(s.has_defected());
        assert_eq!(s.current(), StrategyId::RewriteAttacker);
    }

    #[test]
    fn defector_below_threshold_stays_honest() {
        let v = linear_view(4);
        let mut s = StrategyState::new(StrategySpec::Defector { defect_threshold: 0.33, rewrite_depth: 1 });
        let a = decide_action(&ctx(&v, Disposition::Honest), &mut s);
        assert!(!a.defected);
        assert_eq!(a.produce, Some(ProduceOn::Tip(v.tip())));
    }

    #[test]
    fn attacker_publishes_only_when_strictly_longer() {
        let v = linear_view(3);
        let params = AttackParams { attack_start_round: 0, target_height: 1, victims: vec![], suppress_rounds: None };
        let mut s = StrategyState::new(StrategySpec::RewriteAttacker(params));
        let a = decide_action(&ctx(&v, Disposition::Dishonest), &mut s);
        let base = v.ancestor_at(&v.tip(), 1).unwrap();
        assert_eq!(a.produce, Some(ProduceOn::Private(base)));
        assert!(!a.publish_fork);
        s.extend_private(Digest::of(b"p2"), 2);
        s.extend_private(Digest::of(b"p3"), 3);
        assert!(!s.should_publish(&v), "equal length is not enough");
        s.extend_private(Digest::of(b"p4"), 4);
        assert!(s.should_publish(&v));
        assert_eq!(s.mark_published(), Some((base, Digest::of(b"p4"))));
        let a = decide_action(&ctx(&v, Disposition::Dishonest), &mut s);
        assert_eq!(a.produce, Some(ProduceOn::Tip(v.tip())));
    }

    #[test]
    fn suppression_modes() {
        let iso = Suppression { by: NodeId(9), victims: vec![NodeId(1)], mode: SuppressionMode::Isolate };
        assert!(iso.drops(NodeId(1), NodeId(2)));
        assert!(iso.drops(NodeId(9), NodeId(1)));
        assert!(!iso.drops(NodeId(2), NodeId(3)));
        let ecl = Suppression { by: NodeId(9), victims: vec![NodeId(1)], mode: SuppressionMode::Eclipse };
        assert!(ecl.drops(NodeId(1), NodeId(2)));
        assert!(ecl.drops(NodeId(2), NodeId(1)));
        assert!(!ecl.drops(NodeId(9), NodeId(1)));
        assert!(!ecl.drops(NodeId(1), NodeId(9)));
        assert!(ecl.drops(NodeId(9), NodeId(2)));
        assert!(!ecl.drops(NodeId(2), NodeId(9)));
    }
}
