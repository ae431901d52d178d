//! `bsmd`: run simulations and inspect ledger exports.
//!
//! Exit status is 0 when every check passes, 1 when a run or verification
//! fails, and 2 when an input file cannot be read or parsed. Set `BSMD_LOG`
//! (e.g. `BSMD_LOG=debug`) for event logging on stderr.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bsmd_core::identity::DidString;
use bsmd_core::ledger::{
    audit_query, parse_jsonl, parse_validators, verify_export, write_validators, AuditScope, ExportLine,
};
use bsmd_core::simnet::{self, Scenario, SimConfig, SimReport, CARBONCOUNT_TOML};
use clap::{ArgGroup, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bsmd", version, about = "Owner-controlled mobility data exchange simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write report.json, ledger.jsonl, validators.json and dids.json.
    Run {
        scenario: PathBuf,
        /// Overrides the seed in the scenario's [meta] table.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Omit wall-clock timing so stdout is reproducible.
        #[arg(long)]
        deterministic: bool,
        /// Print the human-readable summary instead of the report path.
        #[arg(long)]
        summary: bool,
    },
    /// Verify a ledger export against a validator set.
    Verify { ledger: PathBuf, validators: PathBuf },
    /// Print the records touching the given DIDs, or all records.
    #[command(group(ArgGroup::new("scope").required(true).args(["did", "all"])))]
    Audit {
        ledger: PathBuf,
        #[arg(long)]
        did: Vec<String>,
        #[arg(long)]
        all: bool,
    },
    /// Write the bundled example scenario.
    Scaffold {
        #[arg(long, default_value = "scenario.toml")]
        out: PathBuf,
    },
    /// Re-read a report and print it or its summary.
    Report {
        file: PathBuf,
        #[arg(long)]
        summary: bool,
    },
}

enum Failure {
    Input(String),
    Failed(String),
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    String::from_utf8(read(path)?).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn cmd_run(path: &Path, seed: Option<u64>, out: &Path, deterministic: bool, summary: bool) -> Result<(), Failure> {
    let text = read_text(path)?;
    let scenario = Scenario::parse(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let config = SimConfig::from_scenario(&scenario, seed);
    let started = Instant::now();
    let output = simnet::run(&scenario, &config).map_err(|e| Failure::Input(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| Failure::Input(format!("{}: {e}", out.display())))?;
    write(&out.join("report.json"), &output.report.to_json())?;
    write(&out.join("ledger.jsonl"), &output.ledger_jsonl)?;
    write(&out.join("validators.json"), &write_validators(&output.validators))?;
    let mut dids = serde_json::to_string_pretty(&output.dids).expect("did map serializes");
    dids.push('\n');
    write(&out.join("dids.json"), &dids)?;
    log::info!("wrote run artifacts to {}", out.display());
    if !deterministic {
        println!(
            "# {} seed {} in {:.3}s",
            scenario.script().meta.name,
            config.seed,
            started.elapsed().as_secs_f64()
        );
    }
    if summary {
        print!("{}", output.report.summary());
    } else {
        println!("{}", out.join("report.json").display());
    }
    if output.report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = output.report.failed_checks().map(|c| c.name.as_str()).collect();
        Err(Failure::Failed(format!("failed checks: {}", failed.join(", "))))
    }
}

fn cmd_verify(ledger: &Path, validators: &Path) -> Result<(), Failure> {
    let set = parse_validators(&read(validators)?).map_err(|e| Failure::Input(e.to_string()))?;
    let verdict = verify_export(&read(ledger)?, &set).map_err(|e| Failure::Failed(e.to_string()))?;
    match verdict.failure {
        None => {
            println!("ok: {} blocks verified", verdict.blocks_checked);
            Ok(())
        }
        Some(f) => Err(Failure::Failed(format!("invalid at height {}: {}", f.height, f.reason))),
    }
}

fn cmd_audit(ledger: &Path, dids: &[String], all: bool) -> Result<(), Failure> {
    let mut chain = Vec::new();
    for line in parse_jsonl(&read(ledger)?).map_err(|e| Failure::Input(e.to_string()))? {
        match line {
            ExportLine::Block(b) => chain.push(b),
            ExportLine::Malformed { line, reason } => {
                return Err(Failure::Input(format!("{}: line {line}: {reason}", ledger.display())))
            }
        }
    }
    let scope = if all {
        AuditScope::All
    } else {
        let set = dids
            .iter()
            .map(|d| DidString::parse(d).map_err(|e| Failure::Input(format!("{d}: {e}"))))
            .collect::<Result<BTreeSet<_>, _>>()?;
        AuditScope::Dids(set)
    };
    for rec in audit_query(&chain, &scope) {
        println!("{}", serde_json::to_string(&rec).expect("record serializes"));
    }
    Ok(())
}

fn cmd_scaffold(out: &Path) -> Result<(), Failure> {
    if out.exists() {
        return Err(Failure::Input(format!("{} already exists", out.display())));
    }
    write(out, CARBONCOUNT_TOML)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_report(file: &Path, summary: bool) -> Result<(), Failure> {
    let text = read_text(file)?;
    let report = SimReport::from_json(&text).map_err(|e| Failure::Input(format!("{}: {e}", file.display())))?;
    if summary {
        print!("{}", report.summary());
    } else {
        print!("{}", report.to_json());
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Failed("report records failed checks".into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BSMD_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            deterministic,
            summary,
        } => cmd_run(scenario, *seed, out, *deterministic, *summary),
        Command::Verify { ledger, validators } => cmd_verify(ledger, validators),
        Command::Audit { ledger, did, all } => cmd_audit(ledger, did, *all),
        Command::Scaffold { out } => cmd_scaffold(out),
        Command::Report { file, summary } => cmd_report(file, *summary),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Failed(msg)) => {
            eprintln!("bsmd: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("bsmd: {msg}");
            ExitCode::from(2)
        }
    }
}
