use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chainend::archive::{compare_archives, verify_snapshot, ArchiveError, Bulletin, Snapshot};
use chainend::batch::{parse_seeds, run_batch, Exec};
use chainend::engine::events::EventLog;
use chainend::engine::metrics;
use chainend::engine::replay::replay;
use chainend::scenario::{load_scenario, ScenarioError};

/// Exit codes: 0 ok, 1 usage, 2 invalid input, 3 runtime failure.
#[derive(Parser)]
#[command(name = "chainend", version, about = "Blockchain life-cycle and shutdown simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario over one or more seeds.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// `n` for seeds 0..n, or a list like `1,4,10..20`.
        #[arg(long, default_value = "1")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        /// Run seeds one at a time even when built with `parallel`.
        #[arg(long)]
        sequential: bool,
    },
    /// Rebuild metrics and the verdict from a binary event log.
    Analyze {
        #[arg(long)]
        events: PathBuf,
        /// Also write the rebuilt metrics CSV here.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Archive(ArchiveCmd),
}

#[derive(Subcommand)]
enum ArchiveCmd {
    /// Check a snapshot against its published commitment.
    Verify {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        bulletin: PathBuf,
    },
    /// Classify a set of snapshots as consistent or divergent.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        snapshots: Vec<PathBuf>,
        #[arg(long)]
        bulletin: Option<PathBuf>,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<ArchiveError> for Failure {
    fn from(e: ArchiveError) -> Self {
        match e {
            ArchiveError::Io(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Simulate { scenario, seeds, out, sequential } => {
            let seeds = parse_seeds(&seeds).map_err(Failure::Invalid)?;
            let scenario = load_scenario(&scenario)?;
            let exec = if sequential { Exec::Sequential } else { Exec::Parallel };
            let summary = run_batch(&scenario, &seeds, Some(&out), exec).map_err(|e| Failure::Runtime(e.to_string()))?;
            let mut brief = serde_json::to_value(&summary).expect("summary serializes");
            brief.as_object_mut().map(|o| o.remove("per_seed"));
            println!("{}", serde_json::to_string_pretty(&brief).expect("json"));
        }
        Cmd::Analyze { events, metrics_out } => {
            let bytes = std::fs::read(&events).map_err(|e| Failure::Runtime(format!("{}: {e}", events.display())))?;
            let log = EventLog::from_bytes(&bytes).map_err(|e| Failure::Invalid(format!("malformed event log: {e}")))?;
            let r = replay(&log)?;
            if let Some(path) = metrics_out {
                std::fs::write(&path, metrics::to_csv(&r.metrics)).map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            let out = serde_json::json!({
                "scenario": r.scenario.name(),
                "seed": r.seed,
                "event_log_digest": r.digest.to_hex(),
                "events": log.events.len(),
                "good_ending": r.verdict.good(),
                "verdict": r.verdict,
                "final_metrics": r.metrics.last(),
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
        }
        Cmd::Archive(ArchiveCmd::Verify { snapshot, bulletin }) => {
            let s = Snapshot::load(&snapshot)?;
            let b = Bulletin::load(&bulletin)?;
            println!("{}", verify_snapshot(&s, &b).as_str());
        }
        Cmd::Archive(ArchiveCmd::Compare { snapshots, bulletin }) => {
            let snaps = snapshots.iter().map(|p| Snapshot::load(p)).collect::<Result<Vec<_>, _>>()?;
            let b = bulletin.map(|p| Bulletin::load(&p)).transpose()?;
            println!("{}", compare_archives(&snaps, b.as_ref()).as_str());
        }
    }
    Ok(())
}
