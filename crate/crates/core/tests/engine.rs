use std::collections::BTreeMap;
use std::sync::Arc;

use chainend::chain::chain_digest;
use chainend::engine::events::{EventData, EventLog};
use chainend::engine::replay::replay;
use chainend::engine::{run, HardForkOutcome, Simulation};
use chainend::ids::NodeId;
use chainend::scenario::{load_scenario, Scenario};

fn scenario(name: &str) -> Scenario {
    let p = format!("{}/scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"));
    load_scenario(p.as_ref()).unwrap()
}

#[test]
fn three_honest_nodes_agree() {
    let r = run(&scenario("minimal"), 7);
    let heights: Vec<u64> = r.views.values().map(|v| v.tip_height()).collect();
    // one block per round; the last one is still in flight
    assert_eq!(*heights.iter().max().unwrap(), 20);
    assert!(heights.iter().all(|h| *h >= 19));
    let digests: Vec<_> = r.views.values().map(|v| chain_digest(v, 19).unwrap()).collect();
    assert!(digests.windows(2).all(|w| w[0] == w[1]));
    assert!(r.verdict.stable);
}

#[test]
fn same_seed_same_log() {
    let s = scenario("abandon_rewrite");
    let (a, b) = (run(&s, 3), run(&s, 3));
    assert_eq!(a.digest, b.digest);
    assert_eq!(a.events, b.events);
    assert_ne!(a.digest, run(&s, 4).digest);
}

#[test]
fn event_log_round_trips() {
    let r = run(&scenario("hard_fork"), 1);
    let log = r.event_log();
    let back = EventLog::from_bytes(&log.to_bytes()).unwrap();
    assert_eq!(back.events, r.events);
    assert_eq!(back.digest(), r.digest);
    let rep = replay(&back).unwrap();
    assert_eq!(rep.metrics, r.metrics);
    assert_eq!(rep.verdict, r.verdict);
    assert_eq!(log.to_jsonl().lines().count(), r.events.len());
}

#[test]
fn truncated_log_is_rejected() {
    let bytes = run(&scenario("minimal"), 0).event_log().to_bytes();
    assert!(EventLog::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(EventLog::from_bytes(b"not a log").is_err());
}

#[test]
fn suppressed_victim_lags_behind() {
    let s = Scenario::from_json(
        r#"{"name":"suppress","horizon":40,
            "universe":[{"id":0,"count":3,"weight":1},
                        {"id":3,"weight":1,"strategy":{"kind":"suppressor","victims":[0],"start_round":5,"rounds":20}}]}"#,
    )
    .unwrap();
    let mut sim = Simulation::new(Arc::new(s), 11);
    while sim.round() < 24 {
        sim.step();
    }
    let victim = sim.node(NodeId(0)).unwrap().view.tip_height();
    let other = sim.node(NodeId(1)).unwrap().view.tip_height();
    assert!(victim < other, "victim at {victim}, others at {other}");
    let dropped: u32 = sim
        .events()
        .iter()
        .filter_map(|e| match e.data {
            EventData::Suppression { by: NodeId(3), dropped, .. } => Some(dropped),
            _ => None,
        })
        .sum();
    assert!(dropped > 0);
    // once suppression ends the victim catches up
    while !sim.is_done() {
        sim.step();
    }
    let r = sim.finish();
    let v0 = &r.views[&NodeId(0)];
    let v1 = &r.views[&NodeId(1)];
    assert_eq!(chain_digest(v0, 30).unwrap(), chain_digest(v1, 30).unwrap());
}

#[test]
fn no_willing_producer_means_no_block() {
    let r = run(&scenario("gap_game"), 0);
    let first = r
        .events
        .iter()
        .find(|e| matches!(e.data, EventData::BlockProduced { .. }))
        .map(|e| e.round)
        .unwrap();
    // one fee per round from round 0: the threshold of 11 is met in round 10
    assert_eq!(first, 10);
    assert_eq!(r.metrics.iter().take_while(|m| m.round < first).map(|m| m.blocks_this_round).sum::<u64>(), 0);
}

#[test]
fn at_most_one_block_per_chain_per_round() {
    for name in ["minimal", "attacker_race", "abandon_rewrite", "hard_fork"] {
        let r = run(&scenario(name), 2);
        let mut per: BTreeMap<(u64, u8), usize> = BTreeMap::new();
        for e in &r.events {
            if let EventData::BlockProduced { chain, .. } = &e.data {
                *per.entry((e.round, *chain)).or_default() += 1;
            }
        }
        // the hard fork's redirect block shares a round with chain 1's first lottery
        let redirect = match r.hard_fork {
            Some(HardForkOutcome::Activated { round, .. }) => Some(round),
            _ => None,
        };
        for ((round, chain), n) in per {
            let cap = if Some(round) == redirect && chain == 1 { 2 } else { 1 };
            assert!(n <= cap, "{name}: {n} blocks on chain {chain} in round {round}");
        }
    }
}

#[test]
fn hard_fork_conserves_the_shared_prefix() {
    let r = run(&scenario("hard_fork"), 0);
    let Some(HardForkOutcome::Activated { fork_height, .. }) = r.hard_fork else {
        panic!("expected activation, got {:?}", r.hard_fork);
    };
    let old = &r.views[&NodeId(5)];
    for id in 0..5 {
        let new = &r.views[&NodeId(id)];
        assert_eq!(chain_digest(new, fork_height).unwrap(), chain_digest(old, fork_height).unwrap());
    }
    assert!(old.tip_height() > fork_height, "old chain kept growing");
    assert_eq!(r.count("chain_switch"), 5);
}
