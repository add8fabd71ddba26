use chainend::batch::{run_batch, summary_path, BatchSummary, Exec};
use chainend::engine::events::EventLog;
use chainend::engine::metrics;
use chainend::scenario::{load_scenario, Scenario};

fn scenario(name: &str) -> Scenario {
    let p = format!("{}/scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"));
    load_scenario(p.as_ref()).unwrap()
}

#[test]
fn abandoned_chain_is_always_rewritten() {
    let seeds: Vec<u64> = (0..100).collect();
    let s = run_batch(&scenario("abandon_rewrite"), &seeds, None, Exec::Parallel).unwrap();
    assert_eq!(s.seeds, 100);
    assert_eq!(s.rewrite_success_rate, Some(1.0));
    assert_eq!(s.stable_rate, Some(0.0));
    assert_eq!(s.cheap_rate, Some(1.0));
}

#[test]
fn stable_final_block_always_ends_well() {
    let seeds: Vec<u64> = (0..100).collect();
    let s = run_batch(&scenario("stable_final_block"), &seeds, None, Exec::Parallel).unwrap();
    assert_eq!(s.good_ending_rate, Some(1.0));
}

#[test]
fn empty_seed_list() {
    let s = run_batch(&scenario("minimal"), &[], None, Exec::Sequential).unwrap();
    assert_eq!(s.seeds, 0);
    assert_eq!(s.stable_rate, None);
    assert_eq!(s.first_lumpy_round.never, 0);
}

#[test]
fn writes_per_seed_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_batch(&scenario("abandon_rewrite"), &[4, 9], Some(dir.path()), Exec::Parallel).unwrap();
    for seed in [4u64, 9] {
        let csv = std::fs::read_to_string(dir.path().join(format!("metrics-{seed}.csv"))).unwrap();
        assert_eq!(metrics::from_csv(&csv).unwrap().len(), 300);
        let log = EventLog::from_bytes(&std::fs::read(dir.path().join(format!("events-{seed}.bin"))).unwrap()).unwrap();
        assert_eq!(log.seed, seed);
        assert!(dir.path().join(format!("events-{seed}.jsonl")).exists());
        assert!(dir.path().join(format!("report-{seed}.json")).exists());
        assert!(dir.path().join(format!("bulletin-{seed}.json")).exists());
    }
    let back: BatchSummary = serde_json::from_str(&std::fs::read_to_string(summary_path(dir.path())).unwrap()).unwrap();
    assert_eq!(back, s);
}
