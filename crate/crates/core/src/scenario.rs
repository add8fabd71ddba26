//! Scenario files: a single JSON document, parsed strictly (unknown keys
//! are rejected) and cross-validated before any run.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::community::{ChurnSchedule, Disposition, NodeSpec, Universe, DEFAULT_SAFETY_FACTOR};
use crate::consensus::ConsensusRule;
use crate::ids::{NodeId, Round, Weight};
use crate::shutdown::{Procedure, ShutdownPlan};
use crate::strategies::{AttackParams, StrategyId, StrategySpec, DEFAULT_DEFECT_THRESHOLD, DEFAULT_REWRITE_DEPTH};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario at {path}: {reason}")]
    Invalid { path: String, reason: String },
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { path: path.into(), reason: reason.into() }
}

/// Strategy object as written in the file: `kind` plus that kind's
/// parameters and nothing else.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyEntry {
    pub kind: Option<StrategyId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fee_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defect_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite_depth: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_start_round: Option<Round>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_height: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub victims: Option<Vec<NodeId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppress_rounds: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_round: Option<Round>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<u64>,
}

/// One universe entry. `count > 1` expands to consecutive ids starting at
/// `id`, all sharing the other fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub id: u32,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub count: u32,
    pub weight: Weight,
    /// Defaults from the strategy: attackers and suppressors are dishonest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disposition: Option<Disposition>,
    #[serde(default)]
    pub strategy: StrategyEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub join_round: Option<Round>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leave_round: Option<Round>,
}

fn one() -> u32 {
    1
}

fn is_one(n: &u32) -> bool {
    *n == 1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Analyzers {
    #[serde(default = "default_safety")]
    pub safety_factor: f64,
    #[serde(default = "one_u64")]
    pub sample_every: u64,
}

fn default_safety() -> f64 {
    DEFAULT_SAFETY_FACTOR
}

fn one_u64() -> u64 {
    1
}

impl Default for Analyzers {
    fn default() -> Self {
        Analyzers { safety_factor: DEFAULT_SAFETY_FACTOR, sample_every: 1 }
    }
}

/// Output file names relative to the `--out` directory; `{seed}` is
/// replaced by the seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default = "default_metrics")]
    pub metrics: String,
    #[serde(default = "default_events")]
    pub events: String,
    #[serde(default = "default_report")]
    pub report: String,
}

fn default_metrics() -> String {
    "metrics-{seed}.csv".into()
}

fn default_events() -> String {
    "events-{seed}.bin".into()
}

fn default_report() -> String {
    "report-{seed}.json".into()
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs { metrics: default_metrics(), events: default_events(), report: default_report() }
    }
}

impl Outputs {
    pub fn for_seed(template: &str, seed: u64) -> String {
        template.replace("{seed}", &seed.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub horizon: Round,
    #[serde(default)]
    pub consensus: ConsensusRule,
    pub universe: Vec<NodeEntry>,
    #[serde(default)]
    pub churn: ChurnSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shutdown: Option<ShutdownPlan>,
    #[serde(default)]
    pub fees_per_round: f64,
    #[serde(default)]
    pub analyzers: Analyzers,
    #[serde(default)]
    pub outputs: Outputs,
}

/// A validated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub universe: Universe,
    pub plan: ShutdownPlan,
}

impl Scenario {
    pub fn name(&self) -> &str {
        &self.file.name
    }

    pub fn horizon(&self) -> Round {
        self.file.horizon
    }

    pub fn consensus(&self) -> ConsensusRule {
        self.file.consensus
    }

    /// Canonical JSON used in event-log headers.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.file).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        ScenarioFile::validate(serde_json::from_str(text)?)
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    Scenario::from_json(&std::fs::read_to_string(path)?)
}

impl ScenarioFile {
    pub fn validate(self) -> Result<Scenario, ScenarioError> {
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be positive"));
        }
        if let Some(k) = self.consensus.confirmation_depth() {
            if k == 0 {
                return Err(invalid("consensus.confirmation_depth", "must be positive"));
            }
        }
        if !(self.fees_per_round.is_finite() && self.fees_per_round >= 0.0) {
            return Err(invalid("fees_per_round", "must be a non-negative number"));
        }
        if !(self.analyzers.safety_factor >= 1.0 && self.analyzers.safety_factor.is_finite()) {
            return Err(invalid("analyzers.safety_factor", "must be at least 1"));
        }
        if self.analyzers.sample_every == 0 {
            return Err(invalid("analyzers.sample_every", "must be positive"));
        }
        self.churn.check().map_err(|e| invalid("churn", e))?;

        let mut ids = BTreeSet::new();
        for (i, e) in self.universe.iter().enumerate() {
            if e.count == 0 {
                return Err(invalid(format!("universe[{i}].count"), "must be positive"));
            }
            for k in 0..e.count {
                let id = e.id.checked_add(k).filter(|id| *id != u32::MAX).ok_or_else(|| {
                    invalid(format!("universe[{i}].id"), "id range overflows")
                })?;
                if !ids.insert(NodeId(id)) {
                    return Err(invalid(format!("universe[{i}]"), format!("duplicate node id {id}")));
                }
            }
        }
        if ids.is_empty() {
            return Err(invalid("universe", "must contain at least one node"));
        }

        let mut nodes = Vec::new();
        for (i, e) in self.universe.iter().enumerate() {
            let at = |field: &str| format!("universe[{i}] (node {}).{field}", e.id);
            if e.weight == 0 {
                return Err(invalid(at("weight"), "must be positive"));
            }
            if let (Some(j), Some(l)) = (e.join_round, e.leave_round) {
                if j >= l {
                    return Err(invalid(at("join_round"), format!("join_round {j} must precede leave_round {l}")));
                }
            }
            let strategy = strategy_spec(&e.strategy, &ids).map_err(|(f, r)| invalid(at(&format!("strategy.{f}")), r))?;
            let disposition = e.disposition.unwrap_or(match strategy.id() {
                StrategyId::RewriteAttacker | StrategyId::Suppressor | StrategyId::LateDominator => {
                    Disposition::Dishonest
                }
                _ => Disposition::Honest,
            });
            for k in 0..e.count {
                let mut spec = NodeSpec::new(e.id + k, e.weight, disposition, strategy.clone());
                spec.join_round = e.join_round;
                spec.leave_round = e.leave_round;
                nodes.push(spec);
            }
        }
        let universe = Universe::new(nodes).map_err(|id| invalid("universe", format!("duplicate node id {id}")))?;

        let plan = self.shutdown.clone().unwrap_or_else(|| {
            ShutdownPlan::none(self.horizon.saturating_sub(crate::shutdown::DEFAULT_GRACE_ROUNDS))
        });
        plan.check(self.horizon).map_err(|r| invalid("shutdown", r))?;
        for (list, name) in [(&plan.archivists, "archivists"), (&plan.non_adopters, "non_adopters")] {
            for id in list {
                if !ids.contains(id) {
                    return Err(invalid(format!("shutdown.{name}"), format!("unknown node {id}")));
                }
            }
        }
        if plan.procedure == Procedure::HardForkToStable && self.consensus.is_stable() {
            return Err(invalid("shutdown.procedure", "hard_fork_to_stable requires unstable consensus"));
        }
        Ok(Scenario { file: self, universe, plan })
    }
}

type FieldError = (&'static str, String);

fn strategy_spec(e: &StrategyEntry, ids: &BTreeSet<NodeId>) -> Result<StrategySpec, FieldError> {
    let kind = e.kind.unwrap_or(StrategyId::HonestDefault);
    let given: [(&'static str, bool); 9] = [
        ("fee_threshold", e.fee_threshold.is_some()),
        ("defect_threshold", e.defect_threshold.is_some()),
        ("rewrite_depth", e.rewrite_depth.is_some()),
        ("attack_start_round", e.attack_start_round.is_some()),
        ("target_height", e.target_height.is_some()),
        ("victims", e.victims.is_some()),
        ("suppress_rounds", e.suppress_rounds.is_some()),
        ("start_round", e.start_round.is_some()),
        ("rounds", e.rounds.is_some()),
    ];
    let allowed: &[&str] = match kind {
        StrategyId::HonestDefault => &[],
        StrategyId::FeeWaiter => &["fee_threshold"],
        StrategyId::Defector => &["defect_threshold", "rewrite_depth"],
        StrategyId::Suppressor => &["victims", "start_round", "rounds"],
        StrategyId::RewriteAttacker | StrategyId::LateDominator => {
            &["attack_start_round", "target_height", "victims", "suppress_rounds"]
        }
    };
    for (name, set) in given {
        if set && !allowed.contains(&name) {
            return Err((name, format!("not a parameter of strategy {}", kind_name(kind))));
        }
    }
    let need = |name: &'static str, v: Option<u64>| {
        v.ok_or_else(|| (name, format!("required by strategy {}", kind_name(kind))))
    };
    let victims = |v: &Option<Vec<NodeId>>| -> Result<Vec<NodeId>, FieldError> {
        let v = v.clone().unwrap_or_default();
        match v.iter().find(|id| !ids.contains(id)) {
            Some(id) => Err(("victims", format!("unknown node {id}"))),
            None => Ok(v),
        }
    };
    Ok(match kind {
        StrategyId::HonestDefault => StrategySpec::HonestDefault,
        StrategyId::FeeWaiter => {
            let t = e.fee_threshold.ok_or(("fee_threshold", "required by strategy fee_waiter".to_string()))?;
            if !(t.is_finite() && t >= 0.0) {
                return Err(("fee_threshold", "must be a non-negative number".into()));
            }
            StrategySpec::FeeWaiter { fee_threshold: t }
        }
        StrategyId::Defector => {
            let t = e.defect_threshold.unwrap_or(DEFAULT_DEFECT_THRESHOLD);
            if !(t > 0.0 && t <= 1.0) {
                return Err(("defect_threshold", format!("{t} must lie in (0, 1]")));
            }
            StrategySpec::Defector { defect_threshold: t, rewrite_depth: e.rewrite_depth.unwrap_or(DEFAULT_REWRITE_DEPTH) }
        }
        StrategyId::Suppressor => {
            let v = victims(&e.victims)?;
            if v.is_empty() {
                return Err(("victims", "required by strategy suppressor".into()));
            }
            StrategySpec::Suppressor { victims: v, start_round: need("start_round", e.start_round)?, rounds: e.rounds }
        }
        StrategyId::RewriteAttacker | StrategyId::LateDominator => {
            let params = AttackParams {
                attack_start_round: need("attack_start_round", e.attack_start_round)?,
                target_height: need("target_height", e.target_height)?,
                victims: victims(&e.victims)?,
                suppress_rounds: e.suppress_rounds,
            };
            if kind == StrategyId::RewriteAttacker {
                StrategySpec::RewriteAttacker(params)
            } else {
                StrategySpec::LateDominator(params)
            }
        }
    })
}

fn kind_name(kind: StrategyId) -> String {
    serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        Scenario::from_json(text)
    }

    const MINIMAL: &str = r#"{"name":"min","horizon":20,"universe":[{"id":0,"count":3,"weight":1}]}"#;

    #[test]
    fn minimal_scenario_loads() {
        let s = parse(MINIMAL).unwrap();
        assert_eq!(s.universe.len(), 3);
        assert_eq!(s.consensus(), ConsensusRule::unstable(6));
        assert_eq!(s.plan.procedure, Procedure::None);
        assert_eq!(s.plan.reference_round(), 20);
        // canonical JSON re-parses to the same scenario
        assert_eq!(parse(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn fee_waiter_without_threshold_names_node() {
        let text = r#"{"name":"x","horizon":20,"universe":[
            {"id":0,"weight":1},
            {"id":7,"weight":1,"strategy":{"kind":"fee_waiter"}}]}"#;
        let err = parse(text).unwrap_err().to_string();
        assert!(err.contains("node 7") && err.contains("fee_threshold"), "{err}");
    }

    #[test]
    fn adoption_threshold_out_of_range() {
        let text = r#"{"name":"x","horizon":100,"universe":[{"id":0,"weight":1}],
            "shutdown":{"procedure":"hard_fork_to_stable","trigger_round":10,"adoption_threshold":1.5}}"#;
        let err = parse(text).unwrap_err().to_string();
        assert!(err.contains("adoption_threshold"), "{err}");
    }

    #[test]
    fn rejections() {
        let cases = [
            (r#"{"name":"x","horizon":20,"universe":[{"id":0,"weight":1}],"bogus":1}"#, "unknown field"),
            (r#"{"name":"x","horizon":20,"universe":[{"id":0,"weight":0}]}"#, "weight"),
            (r#"{"name":"x","horizon":20,"universe":[{"id":0,"weight":1},{"id":0,"weight":1}]}"#, "duplicate"),
            (r#"{"name":"x","horizon":20,"universe":[{"id":0,"weight":1,"join_round":5,"leave_round":5}]}"#, "join_round"),
            (r#"{"name":"x","horizon":20,"universe":[{"id":0,"weight":1,"strategy":{"kind":"honest_default","fee_threshold":3}}]}"#, "not a parameter"),
            (r#"{"name":"x","horizon":20,"universe":[{"id":0,"weight":1,"strategy":{"kind":"rewrite_attacker","target_height":3}}]}"#, "attack_start_round"),
            (r#"{"name":"x","horizon":20,"universe":[{"id":0,"weight":1,"strategy":{"kind":"suppressor","victims":[4],"start_round":0}}]}"#, "unknown node"),
            (r#"{"name":"x","horizon":20,"universe":[{"id":0,"weight":1}],"shutdown":{"trigger_round":15}}"#, "exceeds horizon"),
            (r#"{"name":"x","horizon":20,"consensus":{"kind":"stable","quorum_fraction":"1/2"},"universe":[{"id":0,"weight":1}]}"#, "quorum"),
            (r#"{"name":"x","horizon":20,"universe":[{"id":0,"weight":1}],"shutdown":{"trigger_round":5,"adoption_window":4}}"#, "only allowed"),
        ];
        for (text, needle) in cases {
            let err = parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{needle:?} not in {err:?}");
        }
    }

    #[test]
    fn attacker_defaults_to_dishonest() {
        let text = r#"{"name":"x","horizon":20,"universe":[{"id":0,"weight":1},
            {"id":1,"weight":1,"strategy":{"kind":"rewrite_attacker","attack_start_round":4,"target_height":2}}]}"#;
        let s = parse(text).unwrap();
        assert_eq!(s.universe.get(NodeId(1)).unwrap().disposition, Disposition::Dishonest);
    }
}
