//! `gharmonic <experiment> --config run.json` runs one experiment and writes
//! `report.json` plus CSV tables.
//!
//! Exit codes: 0 every gate passed, 2 configuration error, 3 a gate failed,
//! 4 runtime or solver error.

mod config;
mod experiments;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::Parser;
use serde_json::json;
use sha2::{Digest, Sha256};

use config::{Experiment, ExperimentConfig, Overrides};

const EXIT_CONFIG: u8 = 2;
const EXIT_GATE: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "gharmonic",
    version,
    about = "Numerical checks for g-expectations and g-harmonic functions"
)]
struct Cli {
    #[arg(value_enum)]
    experiment: Experiment,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory (default `gharmonic-out`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn load(path: &Path) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_outputs(
    dir: &Path,
    report: &serde_json::Value,
    artifacts: &[(String, String)],
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(dir.join("report.json"), text)?;
    for (name, body) in artifacts {
        std::fs::write(dir.join(name), body)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        paths: cli.paths,
        steps: cli.steps,
        out: cli.out.clone(),
    });
    let problem = match config::build(&cfg, cli.experiment) {
        Ok(p) => p,
        Err(issues) => {
            eprintln!("configuration error ({} issue(s)):", issues.len());
            for issue in &issues {
                eprintln!("  {issue}");
            }
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let outcome = match experiments::run(&cfg, &problem) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{} failed: {e}", cli.experiment);
            let code = match e {
                gharmonic::Error::Config(_) | gharmonic::Error::Parse(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            };
            return ExitCode::from(code);
        }
    };

    let effective = serde_json::to_value(&cfg).expect("config serializes");
    let hash = Sha256::digest(serde_json::to_vec(&effective).expect("value serializes"));
    let hash: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    let pass = outcome.gates.iter().all(|g| g.pass);
    let report = json!({
        "experiment": cli.experiment,
        "pass": pass,
        "gates": outcome.gates,
        "measurements": outcome.measurements,
        "provenance": {
            "seed": cfg.seed,
            "git_describe": git_describe(),
            "config_sha256": hash,
            "version": env!("CARGO_PKG_VERSION"),
        },
        "effective_config": effective,
    });
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("gharmonic-out"));
    if let Err(e) = write_outputs(&dir, &report, &outcome.artifacts) {
        eprintln!("cannot write outputs to {}: {e}", dir.display());
        return ExitCode::from(EXIT_RUNTIME);
    }
    if !cli.quiet {
        for g in &outcome.gates {
            println!(
                "{} {:<24} measured {:.6e} threshold {:.6e}",
                if g.pass { "PASS" } else { "FAIL" },
                g.name,
                g.measured,
                g.threshold
            );
        }
        println!(
            "{} -> {}",
            if pass { "pass" } else { "fail" },
            dir.join("report.json").display()
        );
    }
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_GATE)
    }
}
