use std::path::Path;
use std::process::{Command, Output};

fn chainend(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chainend")).args(args).output().unwrap()
}

fn scenario(name: &str) -> String {
    format!("{}/scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn simulate(name: &str, seeds: &str, out: &Path) -> Output {
    chainend(&["simulate", "--scenario", &scenario(name), "--seeds", seeds, "--out", out.to_str().unwrap()])
}

#[test]
fn simulate_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate("engaged_forever", "2", dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["seeds"], 2);
    assert_eq!(summary["stable_rate"], 1.0);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report-1.json")).unwrap()).unwrap();
    let events = dir.path().join("events-1.bin");
    let csv = dir.path().join("replayed.csv");
    let o = chainend(&["analyze", "--events", events.to_str().unwrap(), "--metrics-out", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let a: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(a["verdict"], report["verdict"]);
    assert_eq!(a["event_log_digest"], report["event_log_digest"]);
    assert_eq!(std::fs::read(csv).unwrap(), std::fs::read(dir.path().join("metrics-1.csv")).unwrap());
}

#[test]
fn archive_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(simulate("abandon_rewrite", "5..6", dir.path()).status.code(), Some(0));
    let snap = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("snapshot-5-"))
        .expect("a snapshot was written");
    let bulletin = dir.path().join("bulletin-5.json");
    let (s, b) = (snap.to_str().unwrap(), bulletin.to_str().unwrap());

    let o = chainend(&["archive", "verify", "--snapshot", s, "--bulletin", b]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "authentic");

    let o = chainend(&["archive", "compare", "--snapshots", s, s, "--bulletin", b]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "consistent");

    let mut bytes = std::fs::read(&snap).unwrap();
    let n = bytes.len();
    bytes[n - 2] ^= 1;
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, bytes).unwrap();
    let o = chainend(&["archive", "verify", "--snapshot", bad.to_str().unwrap(), "--bulletin", b]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "tampered");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(chainend(&[]).status.code(), Some(1));
    assert_eq!(chainend(&["simulate", "--bogus"]).status.code(), Some(1));
    assert_eq!(chainend(&["--help"]).status.code(), Some(0));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name":"x","horizon":0,"universe":[]}"#).unwrap();
    let o = chainend(&["simulate", "--scenario", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(simulate("minimal", "x", dir.path()).status.code(), Some(2));

    let missing = dir.path().join("nope.json");
    let o = chainend(&["simulate", "--scenario", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    std::fs::write(dir.path().join("junk.bin"), b"junk").unwrap();
    let junk = dir.path().join("junk.bin");
    assert_eq!(chainend(&["analyze", "--events", junk.to_str().unwrap()]).status.code(), Some(2));
}
