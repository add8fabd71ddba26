//! Shutdown procedures, the fixed-depth freeze rule, and the good-ending
//! verdict ("stable and cheap").

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::archive::{fresh_verifier, LiveView};
use crate::chain::{Block, ChainView};
use crate::consensus::Quorum;
use crate::digest::Digest;
use crate::ids::{NodeId, Round};

pub const DEFAULT_GRACE_ROUNDS: u64 = 10;
pub const DEFAULT_ADOPTION_WINDOW: u64 = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    #[default]
    None,
    FinalBlock,
    HardForkToStable,
    AbandonAndArchive,
}

fn default_grace() -> u64 {
    DEFAULT_GRACE_ROUNDS
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShutdownPlan {
    #[serde(default)]
    pub procedure: Procedure,
    /// T: the round the procedure starts. The good-ending reference round
    /// is `T + grace_rounds` for every procedure, including `none`.
    pub trigger_round: Round,
    #[serde(default = "default_grace")]
    pub grace_rounds: u64,
    /// Signalling weight fraction that activates a hard fork (default 2/3).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adoption_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adoption_window: Option<u64>,
    /// Quorum of the post-fork stable chain (default 2/3).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_quorum: Option<Quorum>,
    /// Honest nodes that refuse the hard fork.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub non_adopters: Vec<NodeId>,
    /// Fixed local irreversibility depth, applied at every node every round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze_depth: Option<u64>,
    /// Nodes that snapshot and commit at T. Empty means every active
    /// honest node.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub archivists: Vec<NodeId>,
    /// Honest blocks plus messages tolerated after `T + grace_rounds`.
    #[serde(default)]
    pub cost_budget: u64,
    /// When false the bulletin cannot be consulted by archive-aware readers.
    #[serde(default = "yes")]
    pub bulletin_reachable: bool,
}

impl ShutdownPlan {
    /// A control plan: nothing happens, the verdict is taken at `T + g`.
    pub fn none(trigger_round: Round) -> Self {
        ShutdownPlan {
            procedure: Procedure::None,
            trigger_round,
            grace_rounds: DEFAULT_GRACE_ROUNDS,
            adoption_threshold: None,
            adoption_window: None,
            new_quorum: None,
            non_adopters: Vec::new(),
            freeze_depth: None,
            archivists: Vec::new(),
            cost_budget: 0,
            bulletin_reachable: true,
        }
    }

    pub fn with_procedure(mut self, procedure: Procedure) -> Self {
        self.procedure = procedure;
        self
    }

    pub fn reference_round(&self) -> Round {
        self.trigger_round + self.grace_rounds
    }

    pub fn adoption_threshold(&self) -> f64 {
        self.adoption_threshold.unwrap_or(2.0 / 3.0)
    }

    pub fn adoption_window(&self) -> u64 {
        self.adoption_window.unwrap_or(DEFAULT_ADOPTION_WINDOW)
    }

    pub fn new_quorum(&self) -> Quorum {
        self.new_quorum.unwrap_or_else(Quorum::two_thirds)
    }

    /// Field-level checks that need only the plan and the horizon.
    pub fn check(&self, horizon: Round) -> Result<(), String> {
        if self.reference_round() > horizon {
            return Err(format!(
                "trigger_round + grace_rounds = {} exceeds horizon {horizon}",
                self.reference_round()
            ));
        }
        let hard_fork = self.procedure == Procedure::HardForkToStable;
        if !hard_fork {
            for (set, name) in [
                (self.adoption_threshold.is_some(), "adoption_threshold"),
                (self.adoption_window.is_some(), "adoption_window"),
                (self.new_quorum.is_some(), "new_quorum"),
                (!self.non_adopters.is_empty(), "non_adopters"),
            ] {
                if set {
                    return Err(format!("{name}: only allowed with procedure hard_fork_to_stable"));
                }
            }
        }
        if let Some(t) = self.adoption_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(format!("adoption_threshold: {t} must lie in (0, 1]"));
            }
        }
        if self.adoption_window == Some(0) {
            return Err("adoption_window: must be positive".into());
        }
        if self.freeze_depth == Some(0) {
            return Err("freeze_depth: must be at least 1".into());
        }
        Ok(())
    }
}

/// Applies the fixed-depth irreversibility rule to one view. Returns the
/// new frozen height when it advanced.
pub fn apply_freeze_rule(view: &mut ChainView, depth: u64) -> Option<u64> {
    view.freeze(depth).map(|a| a.height)
}

/// One reference record and how the fresh verifier resolved it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordCheck {
    pub record_id: String,
    pub height: u64,
    #[serde(with = "hex_bytes")]
    pub reference: Vec<u8>,
    #[serde(with = "hex_opt")]
    pub resolved: Option<Vec<u8>>,
}

impl RecordCheck {
    pub fn stable(&self) -> bool {
        self.resolved.as_deref() == Some(self.reference.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictDetail {
    pub reference_round: Round,
    pub reference_node: Option<NodeId>,
    pub reference_records: usize,
    pub unstable_records: Vec<RecordCheck>,
    pub post_shutdown_honest_blocks: u64,
    pub post_shutdown_honest_messages: u64,
    pub cost_budget: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoodEndingVerdict {
    pub stable: bool,
    pub cheap: bool,
    pub detail: VerdictDetail,
}

impl GoodEndingVerdict {
    pub fn good(&self) -> bool {
        self.stable && self.cheap
    }
}

/// Everything the verdict depends on. Both the live engine and the event
/// log replayer can produce this.
pub struct VerdictInputs<'a> {
    pub plan: &'a ShutdownPlan,
    /// Tip path (genesis first) of the reference node at the reference round.
    pub reference_node: Option<NodeId>,
    pub reference_path: Vec<Arc<Block>>,
    pub store: &'a HashMap<Digest, Arc<Block>>,
    pub live: Vec<LiveView>,
    /// Honest (blocks, messages) per round.
    pub honest_cost: &'a BTreeMap<Round, (u64, u64)>,
}

/// Stable: every reference record resolves to identical bytes through the
/// naive fresh verifier at the horizon. Cheap: honest cost after
/// `T + g` is within budget.
pub fn evaluate_good_ending(inputs: &VerdictInputs<'_>) -> GoodEndingVerdict {
    let plan = inputs.plan;
    let reference_round = plan.reference_round();
    let resolver = fresh_verifier(inputs.store, &inputs.live);
    let mut checks = Vec::new();
    for block in &inputs.reference_path {
        for rec in &block.records {
            let resolved = resolver.as_ref().and_then(|r| r.record(&rec.record_id)).map(|r| r.body.clone());
            checks.push(RecordCheck {
                record_id: rec.record_id.clone(),
                height: block.height,
                reference: rec.body.clone(),
                resolved,
            });
        }
    }
    let reference_records = checks.len();
    let unstable_records: Vec<_> = checks.into_iter().filter(|c| !c.stable()).collect();
    let (mut blocks, mut messages) = (0, 0);
    for (_, (b, m)) in inputs.honest_cost.range(reference_round + 1..) {
        blocks += b;
        messages += m;
    }
    GoodEndingVerdict {
        stable: unstable_records.is_empty(),
        cheap: blocks + messages <= plan.cost_budget,
        detail: VerdictDetail {
            reference_round,
            reference_node: inputs.reference_node,
            reference_records,
            unstable_records,
            post_shutdown_honest_blocks: blocks,
            post_shutdown_honest_messages: messages,
            cost_budget: plan.cost_budget,
        },
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

mod hex_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match b {
            Some(b) => s.serialize_some(&hex::encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|h| hex::decode(h).map_err(serde::de::Error::custom))
            .transpose()
    }
}
