//! Multi-seed batch runs and per-seed output files.
//!
//! Seeds are independent, so with the `parallel` feature they run on the
//! rayon pool; the summary is assembled after the join in seed order and
//! does not depend on execution order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{metrics, run_shared, HardForkOutcome, SimResult};
use crate::ids::Round;
use crate::scenario::{Outputs, Scenario};
use crate::shutdown::GoodEndingVerdict;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon when the `parallel` feature is on, sequential otherwise.
    #[default]
    Parallel,
}

pub fn map_seeds_sequential<T, F: Fn(u64) -> T>(seeds: &[u64], f: F) -> Vec<T> {
    seeds.iter().map(|s| f(*s)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_seeds_parallel<T: Send, F: Fn(u64) -> T + Sync + Send>(seeds: &[u64], f: F) -> Vec<T> {
    use rayon::prelude::*;
    seeds.par_iter().map(|s| f(*s)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_seeds_parallel<T: Send, F: Fn(u64) -> T + Sync + Send>(seeds: &[u64], f: F) -> Vec<T> {
    map_seeds_sequential(seeds, f)
}

pub fn map_seeds<T: Send, F: Fn(u64) -> T + Sync + Send>(seeds: &[u64], exec: Exec, f: F) -> Vec<T> {
    match exec {
        Exec::Sequential => map_seeds_sequential(seeds, f),
        Exec::Parallel => map_seeds_parallel(seeds, f),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub scenario: String,
    pub seed: u64,
    pub event_log_digest: String,
    pub verdict: GoodEndingVerdict,
    pub rewrite_succeeded: bool,
    pub first_lumpy_round: Option<Round>,
    pub permanent_split: bool,
    pub hard_fork: Option<String>,
    pub event_counts: BTreeMap<String, usize>,
}

impl SeedReport {
    pub fn of(name: &str, r: &SimResult) -> Self {
        let mut event_counts = BTreeMap::new();
        for e in &r.events {
            *event_counts.entry(e.data.kind().to_string()).or_insert(0) += 1;
        }
        SeedReport {
            scenario: name.to_string(),
            seed: r.seed,
            event_log_digest: r.digest.to_hex(),
            verdict: r.verdict.clone(),
            rewrite_succeeded: r.rewrite_succeeded(),
            first_lumpy_round: r.first_lumpy_round(),
            permanent_split: r.permanent_split().is_some(),
            hard_fork: r.hard_fork.map(|h| match h {
                HardForkOutcome::Activated { fork_height, round, .. } => {
                    format!("activated at round {round} from height {fork_height}")
                }
                HardForkOutcome::Failed { round } => format!("failed at round {round}"),
            }),
            event_counts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LumpyDistribution {
    pub never: usize,
    pub min: Option<Round>,
    pub median: Option<Round>,
    pub max: Option<Round>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub scenario: String,
    pub seeds: usize,
    /// Rates are `None` for an empty batch.
    pub good_ending_rate: Option<f64>,
    pub stable_rate: Option<f64>,
    pub cheap_rate: Option<f64>,
    pub rewrite_success_rate: Option<f64>,
    pub first_lumpy_round: LumpyDistribution,
    pub per_seed: Vec<SeedReport>,
}

impl BatchSummary {
    pub fn from_reports(scenario: &str, per_seed: Vec<SeedReport>) -> Self {
        let n = per_seed.len();
        let rate = |f: &dyn Fn(&SeedReport) -> bool| {
            (n > 0).then(|| per_seed.iter().filter(|r| f(r)).count() as f64 / n as f64)
        };
        let mut lumpy: Vec<Round> = per_seed.iter().filter_map(|r| r.first_lumpy_round).collect();
        lumpy.sort_unstable();
        BatchSummary {
            scenario: scenario.to_string(),
            seeds: n,
            good_ending_rate: rate(&|r| r.verdict.good()),
            stable_rate: rate(&|r| r.verdict.stable),
            cheap_rate: rate(&|r| r.verdict.cheap),
            rewrite_success_rate: rate(&|r| r.rewrite_succeeded),
            first_lumpy_round: LumpyDistribution {
                never: n - lumpy.len(),
                min: lumpy.first().copied(),
                median: lumpy.get(lumpy.len() / 2).copied(),
                max: lumpy.last().copied(),
            },
            per_seed,
        }
    }
}

/// Writes metrics CSV, binary event log (plus a `.jsonl` rendering),
/// report, and any archive snapshots with their bulletin.
pub fn write_outputs(out: &Path, outputs: &Outputs, report: &SeedReport, r: &SimResult) -> std::io::Result<()> {
    let seed = r.seed;
    let path = |t: &str| out.join(Outputs::for_seed(t, seed));
    std::fs::write(path(&outputs.metrics), metrics::to_csv(&r.metrics))?;
    let log = r.event_log();
    let events = path(&outputs.events);
    std::fs::write(&events, log.to_bytes())?;
    std::fs::write(events.with_extension("jsonl"), log.to_jsonl())?;
    std::fs::write(path(&outputs.report), serde_json::to_string_pretty(report).expect("report serializes"))?;
    if !r.snapshots.is_empty() {
        for s in &r.snapshots {
            std::fs::write(out.join(format!("snapshot-{seed}-n{}.bin", s.archivist.0)), s.to_bytes())?;
        }
        std::fs::write(out.join(format!("bulletin-{seed}.json")), r.bulletin.to_json())?;
    }
    Ok(())
}

/// Runs every seed, optionally writing per-seed outputs under `out`, and
/// writes `summary.json` there after all seeds finish.
pub fn run_batch(scenario: &Scenario, seeds: &[u64], out: Option<&Path>, exec: Exec) -> std::io::Result<BatchSummary> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let shared = Arc::new(scenario.clone());
    let name = scenario.name().to_string();
    let reports = map_seeds(seeds, exec, |seed| -> std::io::Result<SeedReport> {
        let r = run_shared(shared.clone(), seed);
        let report = SeedReport::of(&name, &r);
        if let Some(dir) = out {
            write_outputs(dir, &shared.file.outputs, &report, &r)?;
        }
        Ok(report)
    });
    let reports = reports.into_iter().collect::<std::io::Result<Vec<_>>>()?;
    let summary = BatchSummary::from_reports(&name, reports);
    if let Some(dir) = out {
        std::fs::write(summary_path(dir), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    }
    Ok(summary)
}

pub fn summary_path(out: &Path) -> PathBuf {
    out.join("summary.json")
}

/// `n` means `0..n`; otherwise a comma-separated list of seeds or
/// `a..b` ranges.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    if !text.contains([',', '.']) {
        let n: u64 = text.parse().map_err(|_| format!("bad seed count {text:?}"))?;
        return Ok((0..n).collect());
    }
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let a: u64 = a.parse().map_err(|_| format!("bad range {part:?}"))?;
                let b: u64 = b.parse().map_err(|_| format!("bad range {part:?}"))?;
                out.extend(a..b);
            }
            None => out.push(part.parse().map_err(|_| format!("bad seed {part:?}"))?),
        }
    }
    Ok(out)
}
