//! End-to-end acceptance checks. Runs without the libtest harness so that
//! one PASS/FAIL line per criterion is always printed.

use std::collections::{HashMap, HashSet};
use std::process::ExitCode;
use std::sync::Arc;

use chainend::archive::{compare_archives, resolve_query, snapshot_chain, ArchiveComparison, QueryPolicy};
use chainend::batch::{map_seeds, Exec};
use chainend::chain::{chain_digest, Anchor, Block};
use chainend::community::{is_lumpy, CommunitySnapshot, Disposition, NodeSpec, Universe};
use chainend::consensus::ConsensusRule;
use chainend::digest::Digest;
use chainend::engine::replay::replay;
use chainend::engine::{run, run_shared, HardForkOutcome, SimResult};
use chainend::ids::NodeId;
use chainend::scenario::{load_scenario, Scenario};
use chainend::strategies::StrategySpec;

const SEEDS: u64 = 100;
const RACE_SEEDS: u64 = 5000;
const RACE_TOLERANCE: f64 = 0.03;
/// Blocks the attacker must make up when the race starts.
const RACE_DEFICIT: i32 = 2;
const FREEZE_SEED: u64 = 7;

fn scenario(name: &str) -> Scenario {
    let p = format!("{}/scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"));
    load_scenario(p.as_ref()).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn runs(s: &Scenario, n: u64) -> Vec<SimResult> {
    let shared = Arc::new(s.clone());
    let seeds: Vec<u64> = (0..n).collect();
    map_seeds(&seeds, Exec::Parallel, |seed| run_shared(shared.clone(), seed))
}

fn original_body(seed: u64, record_id: &str) -> Vec<u8> {
    let q = record_id.strip_prefix("rec-").expect("data record id");
    format!("record {q} of run {seed}").into_bytes()
}

fn forged(bytes: &[u8]) -> bool {
    bytes.starts_with(b"forged:")
}

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, pass: String, fail: String) -> Outcome {
    if ok {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn c1() -> Outcome {
    let rs = runs(&scenario("stable_final_block"), SEEDS);
    let good = rs.iter().filter(|r| r.verdict.stable && r.verdict.cheap).count();
    check(good as u64 == SEEDS, format!("good ending on {good}/{SEEDS} seeds"), format!("good ending on only {good}/{SEEDS} seeds"))
}

fn c2() -> Outcome {
    let rs = runs(&scenario("abandon_rewrite"), SEEDS);
    let mut ok = 0;
    for r in &rs {
        let checks = &r.verdict.detail.unstable_records;
        let rewritten = checks.iter().any(|c| {
            c.record_id.starts_with("rec-")
                && c.reference == original_body(r.seed, &c.record_id)
                && c.resolved.as_deref().is_some_and(forged)
        });
        if rewritten && !r.verdict.stable && r.verdict.cheap {
            ok += 1;
        }
    }
    check(
        ok == SEEDS,
        format!("naive verifier returns forged bytes, verdict (stable=false, cheap=true) on {ok}/{SEEDS} seeds"),
        format!("rewrite with (stable=false, cheap=true) on only {ok}/{SEEDS} seeds"),
    )
}

fn c3() -> Outcome {
    let s = scenario("engaged_forever");
    let t = s.plan.trigger_round;
    let rs = runs(&s, SEEDS);
    let mut ok = 0;
    for r in &rs {
        let after: Vec<u64> = r.metrics.iter().filter(|m| m.round >= t).map(|m| m.honest_cost_cum).collect();
        let increasing = after.windows(2).all(|w| w[1] > w[0]);
        if increasing && r.verdict.stable && !r.verdict.cheap {
            ok += 1;
        }
    }
    check(
        ok == SEEDS,
        format!("(stable=true, cheap=false) with strictly rising honest cost after T={t} on {ok}/{SEEDS} seeds"),
        format!("only {ok}/{SEEDS} seeds"),
    )
}

fn c4() -> Outcome {
    let s = scenario("attacker_race");
    let (mut a, mut h) = (0u64, 0u64);
    for n in s.universe.nodes() {
        match n.disposition {
            Disposition::Honest => h += n.weight,
            Disposition::Dishonest => a += n.weight,
        }
    }
    let oracle = (a as f64 / h as f64).powi(RACE_DEFICIT);
    let shared = Arc::new(s);
    let seeds: Vec<u64> = (0..RACE_SEEDS).collect();
    let wins = map_seeds(&seeds, Exec::Parallel, |seed| run_shared(shared.clone(), seed).rewrite_succeeded())
        .into_iter()
        .filter(|w| *w)
        .count();
    let freq = wins as f64 / RACE_SEEDS as f64;
    let msg = format!("overtake frequency {freq:.4} vs oracle {oracle:.4} over {RACE_SEEDS} seeds (a:h = {a}:{h}, z = {RACE_DEFICIT})");
    check((freq - oracle).abs() <= RACE_TOLERANCE, msg.clone(), msg)
}

/// Lumpy iff some single toggle flips `honest > dishonest`, by enumeration.
fn brute_lumpy(h: u64, d: u64, outside_h: u64, outside_d: u64) -> bool {
    let honest = |h: u64, d: u64| h > d;
    let base = honest(h, d);
    (h > 0 && honest(h - 1, d) != base)
        || (d > 0 && honest(h, d - 1) != base)
        || (outside_h > 0 && honest(h + 1, d) != base)
        || (outside_d > 0 && honest(h, d + 1) != base)
}

fn c5() -> Outcome {
    let rule = ConsensusRule::unstable(6);
    let mut disagreements = Vec::new();
    let mut boundary_violations = Vec::new();
    let mut checked = 0;
    for spare in [false, true] {
        for h in 0..=40u64 {
            for d in 0..=(40 - h) {
                // universe: the community, plus one absent node of each kind when `spare`
                let mut specs = Vec::new();
                let mut members = Vec::new();
                let mut id = 0u32;
                for (count, disp) in [(h, Disposition::Honest), (d, Disposition::Dishonest)] {
                    for _ in 0..count {
                        specs.push(NodeSpec::new(id, 1, disp, StrategySpec::HonestDefault));
                        members.push((NodeId(id), 1, disp));
                        id += 1;
                    }
                }
                if spare {
                    specs.push(NodeSpec::new(id, 1, Disposition::Honest, StrategySpec::HonestDefault));
                    specs.push(NodeSpec::new(id + 1, 1, Disposition::Dishonest, StrategySpec::HonestDefault));
                }
                let universe = Universe::new(specs).unwrap();
                let snap = CommunitySnapshot::from_members(0, members);
                let got = is_lumpy(&universe, &snap, &rule).lumpy;
                let extra = spare as u64;
                let want = brute_lumpy(h, d, extra, extra);
                checked += 1;
                if got != want {
                    disagreements.push((h, d, spare));
                }
                // with h >= d the boundary is h - d <= 1; below that the
                // community is already dishonest and only a tie is lumpy
                let diff = h as i64 - d as i64;
                let boundary = if h + d == 0 && !spare { false } else { (0..=1).contains(&diff) };
                if got != boundary || (h >= d && got != (diff <= 1) && (h + d > 0 || spare)) {
                    boundary_violations.push((h, d, spare));
                }
            }
        }
    }
    check(
        disagreements.is_empty() && boundary_violations.is_empty(),
        format!("is_lumpy matches enumeration on {checked} (h, d) cases with h + d <= 40; lumpy exactly when 0 <= h - d <= 1"),
        format!("disagreements {disagreements:?}, boundary violations {boundary_violations:?}"),
    )
}

/// Walks parent links in the global block store.
fn ancestor(store: &HashMap<Digest, Arc<Block>>, id: Digest, height: u64) -> Option<Digest> {
    let mut b = store.get(&id)?;
    while b.height > height {
        b = store.get(&b.parent_id)?;
    }
    Some(b.id)
}

fn incompatible(store: &HashMap<Digest, Arc<Block>>, a: &Anchor, b: &Anchor) -> bool {
    let (lo, hi) = if a.height <= b.height { (a, b) } else { (b, a) };
    ancestor(store, hi.id, lo.height) != Some(lo.id)
}

fn c6() -> Outcome {
    let s = scenario("freeze_exploit");
    let depth = s.plan.freeze_depth;
    let attacker = s.universe.nodes().iter().filter(|n| n.disposition == Disposition::Dishonest).map(|n| n.weight).sum::<u64>();
    let honest = s.universe.nodes().iter().filter(|n| n.disposition == Disposition::Honest).map(|n| n.weight).max().unwrap_or(0);
    let r = run(&s, FREEZE_SEED);
    let Some(groups) = r.permanent_split() else {
        return Err(format!("no permanent_split event for seed {FREEZE_SEED}"));
    };
    // confirm against the nodes' own frozen anchors at the horizon
    let frozen: Vec<(NodeId, Anchor)> = groups
        .iter()
        .flat_map(|(_, nodes)| nodes.iter().map(|n| (*n, r.views[n].frozen())))
        .collect();
    let split = frozen.iter().any(|(_, a)| frozen.iter().any(|(_, b)| incompatible(&r.blocks, a, b)));
    let subsets: Vec<Vec<NodeId>> = groups.iter().map(|(_, n)| n.clone()).collect();
    check(
        depth == Some(3) && attacker >= honest && split && groups.len() >= 2,
        format!("seed {FREEZE_SEED}: freeze depth 3, attacker weight {attacker} >= {honest}; subsets {subsets:?} hold incompatible frozen prefixes"),
        format!("seed {FREEZE_SEED}: depth {depth:?}, groups {subsets:?}, incompatible={split}"),
    )
}

fn c7() -> Outcome {
    let s = scenario("hard_fork");
    let r = run(&s, 0);
    let Some(HardForkOutcome::Activated { fork_height, round, .. }) = r.hard_fork else {
        return Err(format!("hard fork not activated: {:?}", r.hard_fork));
    };
    let stayers: HashSet<NodeId> = s.plan.non_adopters.iter().copied().collect();
    let old = &r.views[s.plan.non_adopters.first().expect("a non-adopter")];
    let old_prefix = chain_digest(old, fork_height).map_err(|e| e.to_string())?;
    let mut shared = true;
    let mut finalized_new = true;
    for (id, v) in &r.views {
        if stayers.contains(id) {
            continue;
        }
        shared &= chain_digest(v, fork_height).ok() == Some(old_prefix);
        finalized_new &= v.finalized_height() > fork_height;
    }
    let persists = old.tip_height() > fork_height + 10 && r.active.contains(&old.owner());

    let c = scenario("hard_fork_censored");
    let rc = run(&c, 0);
    let window_end = c.plan.trigger_round + c.plan.adoption_window();
    let failed = matches!(rc.hard_fork, Some(HardForkOutcome::Failed { round }) if round <= window_end);
    check(
        shared && finalized_new && persists && failed,
        format!(
            "activated at round {round}, prefix to height {fork_height} digest-equal on both chains, old chain at height {}, censored variant {:?}",
            old.tip_height(),
            rc.hard_fork
        ),
        format!("shared={shared} finalized={finalized_new} persists={persists} censored={:?}", rc.hard_fork),
    )
}

fn c8() -> Outcome {
    let s = scenario("abandon_rewrite");
    let rs = runs(&s, SEEDS);
    let mut gap = 0;
    let mut classified = 0;
    let mut tail = 0;
    for r in &rs {
        // the unsettled tail at snapshot time (the last k blocks) is in no archive
        let archived = r.snapshots.iter().map(|s| s.height).max().unwrap_or(0);
        let checks = &r.verdict.detail.unstable_records;
        tail += checks.iter().filter(|c| c.height > archived).count();
        let data: Vec<_> = checks.iter().filter(|c| c.record_id.starts_with("rec-") && c.height <= archived).collect();
        let resolves = !data.is_empty()
            && data.iter().all(|c| {
                let original = original_body(r.seed, &c.record_id);
                let q = |p| resolve_query(&c.record_id, &r.blocks, &r.live, &r.snapshots, Some(&r.bulletin), p);
                q(QueryPolicy::ArchiveAware) == Some(original.clone()) && q(QueryPolicy::Naive).as_deref().is_some_and(forged)
            });
        if resolves {
            gap += 1;
        }
        // honest committed snapshot against the attacker's chain
        let Some(honest) = r.snapshots.first() else { continue };
        let attacker = s.universe.nodes().iter().find(|n| n.disposition == Disposition::Dishonest).unwrap().id;
        let view = &r.views[&attacker];
        let rule = s.consensus();
        let h = rule.settled_height(view).min(honest.height.max(1));
        let Ok(theirs) = snapshot_chain(view, &rule, h, attacker, r.metrics.len() as u64) else { continue };
        let pair = [honest.clone(), theirs];
        if compare_archives(&pair, Some(&r.bulletin)) == ArchiveComparison::DivergentResolvable
            && compare_archives(&pair, None) == ArchiveComparison::DivergentUnresolvable
        {
            classified += 1;
        }
    }
    check(
        gap == SEEDS && classified == SEEDS,
        format!("archive-aware returns originals while naive returns forgeries for every archived rewritten record on {gap}/{SEEDS} ({tail} unarchived tail records left to the live network); divergent_resolvable -> divergent_unresolvable without bulletin on {classified}/{SEEDS}"),
        format!("resolution gap on {gap}/{SEEDS}, classification on {classified}/{SEEDS}"),
    )
}

const ALL_SCENARIOS: &[&str] = &[
    "minimal",
    "stable_final_block",
    "abandon_rewrite",
    "engaged_forever",
    "attacker_race",
    "freeze_exploit",
    "hard_fork",
    "hard_fork_censored",
    "gap_game",
];

fn c9() -> Outcome {
    let mut bad = Vec::new();
    let mut n = 0;
    for name in ALL_SCENARIOS {
        let s = scenario(name);
        for seed in 0..3 {
            let (a, b) = (run(&s, seed), run(&s, seed));
            let rep = replay(&a.event_log()).map_err(|e| format!("{name}: {e}"))?;
            n += 1;
            if a.digest != b.digest || rep.digest != a.digest || rep.verdict != a.verdict || rep.metrics != a.metrics {
                bad.push(format!("{name}/{seed}"));
            }
        }
    }
    check(
        bad.is_empty(),
        format!("{n} scenario/seed pairs: equal digests across runs; replay reproduces verdicts and metrics"),
        format!("mismatch in {bad:?}"),
    )
}

fn c10() -> Outcome {
    let s = scenario("gap_game");
    let mut failures = Vec::new();
    let mut stretches = 0;
    for r in runs(&s, 10) {
        let blocks: Vec<u64> = r.metrics.iter().filter(|m| m.blocks_this_round > 0).map(|m| m.round).collect();
        let produced_events = r.count("block_produced");
        // each stretch: the 10 rounds after a block (or from round 0), where fees stay below threshold
        let starts: Vec<u64> = std::iter::once(0).chain(blocks.iter().map(|b| b + 1)).collect();
        for start in starts {
            let end = start + 10;
            if end > s.horizon() {
                break;
            }
            stretches += 1;
            let inside = |round: u64| (start..end).contains(&round);
            let events_inside = r.events.iter().filter(|e| inside(e.round) && e.data.kind() == "block_produced").count();
            let samples: Vec<_> = r.production.iter().filter(|p| inside(p.round)).collect();
            let thin = !samples.is_empty() && samples.iter().all(|p| p.production_thin && !p.membership_thin && !p.produced);
            if events_inside > 0 || !thin {
                failures.push((r.seed, start));
            }
        }
        if produced_events == 0 {
            failures.push((r.seed, u64::MAX));
        }
    }
    check(
        failures.is_empty() && stretches > 0,
        format!("{stretches} ten-round stretches without a block; production thin while membership thick throughout"),
        format!("failing (seed, stretch start): {failures:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] =
        [("C1", c1), ("C2", c2), ("C3", c3), ("C4", c4), ("C5", c5), ("C6", c6), ("C7", c7), ("C8", c8), ("C9", c9), ("C10", c10)];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = std::time::Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS {name} {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name} {msg} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
