//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation failure, 2 bad usage (including
//! missing input files).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iovfl_core::orchestrator::{read_explanations, write_artifacts, ConfigError, RoundStatus};
use iovfl_core::{run, run_attack_suite, verify_chain, Chain, ChainStatus, RunConfig};

const ATTACKS_FILE: &str = "attacks.json";

#[derive(Parser)]
#[command(name = "iovfl", version, about = "Federated learning fleet simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write artifacts to the configured output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the attack suite against honest baselines.
    Attack {
        #[arg(long)]
        config: PathBuf,
    },
    /// Ledger utilities.
    Ledger {
        #[command(subcommand)]
        command: LedgerCommand,
    },
    /// Show the explanations a node produced during a run.
    Explain {
        /// Output directory of a previous run.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        node: String,
        /// Restrict to one round.
        #[arg(long)]
        round: Option<u64>,
        /// Print the raw records as JSON lines.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum LedgerCommand {
    /// Check the hash links, block hashes and attestations of an exported chain.
    Verify {
        #[arg(long)]
        chain: PathBuf,
    },
}

/// A failure mapped to its exit code.
enum Failure {
    Usage(String),
    Invalid(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Invalid(m) => f.write_str(m),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Invalid(_) => 1,
        }
    }
}

fn invalid(e: impl fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn require_exists(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    require_exists(path, "config")?;
    RunConfig::load(path).map_err(|e| match e {
        ConfigError::Io { .. } => Failure::Usage(e.to_string()),
        other => invalid(other),
    })
}

fn cmd_run(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let out = run(&cfg).map_err(invalid)?;
    let dir = cfg.resolved_output_dir();
    let paths = write_artifacts(&out, &dir).map_err(|e| invalid(format!("writing {}: {e}", dir.display())))?;
    for r in &out.reports {
        let status = match r.status {
            RoundStatus::Completed => "completed".to_string(),
            RoundStatus::Aborted => format!("aborted ({})", r.abort_reason.as_deref().unwrap_or("")),
        };
        println!(
            "round {:>3}  v{:<3} acc {:.4}  loss {:.4}  blocks {:>2}  {status}",
            r.round, r.global_version, r.global_accuracy, r.global_loss, r.blocks_appended
        );
    }
    match verify_chain(&out.chain) {
        ChainStatus::Valid => {}
        ChainStatus::FirstBadIndex(k) => return Err(invalid(format!("chain fails verification at block {k}"))),
    }
    println!("chain: {} blocks, head {}", out.chain.len(), out.chain.head_hash());
    println!("artifacts: {}", paths.metrics.parent().unwrap_or(&dir).display());
    Ok(())
}

fn cmd_attack(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let reports = run_attack_suite(&cfg, &cfg.attack.seeds).map_err(invalid)?;
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir).map_err(invalid)?;
    let json = serde_json::to_string_pretty(&reports).map_err(invalid)?;
    std::fs::write(dir.join(ATTACKS_FILE), json + "\n").map_err(invalid)?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        let leak = if r.kind == iovfl_core::AttackKind::Eavesdrop {
            format!("  leaked {}", r.leaked)
        } else {
            String::new()
        };
        println!(
            "{verdict}  seed {:<4} {:<15} injected {:>4}  detected {:>4}  expected {:>4}{leak}",
            r.seed,
            r.kind.label(),
            r.injected,
            r.detected,
            r.expected
        );
        for n in &r.notes {
            println!("      {n}");
        }
    }
    println!("front_running: not modelled; the protocol defines no mechanism to test");
    if failed > 0 {
        return Err(Failure::Invalid(format!("{failed} attack checks failed")));
    }
    Ok(())
}

fn cmd_ledger_verify(path: &Path) -> Result<(), Failure> {
    require_exists(path, "chain")?;
    let chain = Chain::import(path).map_err(invalid)?;
    match verify_chain(&chain) {
        ChainStatus::Valid => {
            println!("valid: {} blocks, head {}", chain.len(), chain.head_hash());
            Ok(())
        }
        ChainStatus::FirstBadIndex(k) => {
            println!("FirstBadIndex({k})");
            Err(Failure::Invalid(format!("chain fails verification at block {k}")))
        }
    }
}

fn cmd_explain(dir: &Path, node: &str, round: Option<u64>, json: bool) -> Result<(), Failure> {
    require_exists(dir, "run directory")?;
    let records: Vec<_> = read_explanations(dir)
        .map_err(|e| Failure::Usage(format!("reading explanations in {}: {e}", dir.display())))?
        .into_iter()
        .filter(|r| r.node == node && round.is_none_or(|x| r.round == x))
        .collect();
    if records.is_empty() {
        return Err(Failure::Invalid(format!("no explanations for {node}")));
    }
    if json {
        for r in &records {
            println!("{}", serde_json::to_string(r).map_err(invalid)?);
        }
        return Ok(());
    }
    let mut by_round: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for r in &records {
        by_round.entry(r.round).or_default().push(r);
    }
    println!("{node}: {} explanations over {} rounds", records.len(), by_round.len());
    for (round, rs) in by_round {
        let d = rs[0].attributions.len();
        let mut mean = vec![0.0; d];
        for r in &rs {
            for (m, a) in mean.iter_mut().zip(&r.attributions) {
                *m += a / rs.len() as f64;
            }
        }
        let stability = rs.iter().map(|r| r.stability).sum::<f64>() / rs.len() as f64;
        let top = (0..d).fold(0, |b, j| if mean[j] > mean[b] { j } else { b });
        let cols: Vec<String> = mean.iter().map(|m| format!("{m:.4}")).collect();
        println!(
            "round {round:>3}  samples {:>3}  stability {stability:.3}  top {top}  [{}]",
            rs.len(),
            cols.join(" ")
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run { config } => cmd_run(config),
        Command::Attack { config } => cmd_attack(config),
        Command::Ledger {
            command: LedgerCommand::Verify { chain },
        } => cmd_ledger_verify(chain),
        Command::Explain { run, node, round, json } => cmd_explain(run, node, *round, *json),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("iovfl: {f}");
            ExitCode::from(f.code())
        }
    }
}
