//! `icl-lab`: runs in-context regression experiments and writes their tables.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad config or input,
//! 3 a checked bound was violated (or a soft check failed under `--strict`).

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use commands::{Run, COMMANDS};
use config::{parse_overrides, read_file, Config, ConfigError};
use output::{json_bytes, versions, Manifest};

#[derive(Debug, Parser)]
#[command(name = "icl-lab", version, about = "In-context linear regression with linear attention")]
struct Cli {
    /// One of: train, evaluate, sweep-depth, sweep-ood, lowerbound,
    /// terminate, monotonicity, blowup, robustness, construct
    command: String,
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Treat soft checks as failures
    #[arg(long)]
    strict: bool,
    /// Config overrides as `--key value`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    params: Vec<String>,
}

enum Outcome {
    Ok,
    Violation,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<ConfigError>() || e.is::<icl_core::weights_io::WeightFileError>()) {
        return 2;
    }
    match err.downcast_ref::<icl_core::IclError>() {
        Some(
            icl_core::IclError::InvalidArgument(_)
            | icl_core::IclError::InvalidDistribution(_)
            | icl_core::IclError::DimensionMismatch { .. },
        ) => 2,
        _ => 1,
    }
}

/// Moves global flags written after the subcommand back onto `cli`.
fn hoist_globals(cli: &mut Cli) -> Result<(), ConfigError> {
    let params = std::mem::take(&mut cli.params);
    let mut it = params.into_iter();
    while let Some(a) = it.next() {
        let (flag, inline) = match a.split_once('=') {
            Some((f, v)) => (f.to_string(), Some(v.to_string())),
            None => (a.clone(), None),
        };
        if flag == "--strict" && inline.is_none() {
            cli.strict = true;
            continue;
        }
        if !matches!(flag.as_str(), "--config" | "--out" | "--seed" | "--threads") {
            cli.params.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| ConfigError::BadOverride(a.clone()))?,
        };
        let bad = |reason: String| ConfigError::Invalid {
            key: flag[2..].to_string(),
            value: value.clone(),
            reason,
        };
        match flag.as_str() {
            "--config" => cli.config = Some(PathBuf::from(&value)),
            "--out" => cli.out = PathBuf::from(&value),
            "--seed" => cli.seed = Some(value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
            _ => cli.threads = Some(value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
        }
    }
    Ok(())
}

fn run(mut cli: Cli) -> Result<Outcome> {
    hoist_globals(&mut cli)?;
    let cmd = commands::find(&cli.command).ok_or_else(|| ConfigError::Invalid {
        key: "command".into(),
        value: cli.command.clone(),
        reason: format!(
            "expected one of {}",
            COMMANDS.iter().map(|c| c.name).collect::<Vec<_>>().join(", ")
        ),
    })?;
    if let Some(n) = cli.threads {
        icl_core::par::init_threads(n).map_err(anyhow::Error::msg)?;
    }
    let mut entries = match &cli.config {
        Some(p) => read_file(p)?,
        None => vec![],
    };
    entries.extend(parse_overrides(&cli.params)?);
    let mut cfg = Config::resolve(cmd.name, cmd.schema, entries)?;
    if let Some(s) = cli.seed {
        cfg.set("seed", s.to_string());
    }
    let seed = cfg.u64("seed")?;
    let mut run = Run {
        cfg,
        seed,
        strict: cli.strict,
        out: cli.out.clone(),
        outputs: vec![],
        checks: vec![],
    };
    (cmd.run)(&mut run)?;

    let failing: Vec<String> = run
        .failing_checks()
        .iter()
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    for c in run.checks.iter().filter(|c| !c.passed) {
        let tag = if c.hard || run.strict { "FAIL" } else { "warning" };
        eprintln!("{tag}: {}: {}", c.name, c.detail);
    }
    let status = if failing.is_empty() {
        "ok".to_string()
    } else {
        format!("violation: {}", failing.join("; "))
    };
    let mut outputs = run.outputs.clone();
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        command: cmd.name,
        config: run.cfg.values(),
        seed,
        strict: run.strict,
        versions: versions(),
        outputs,
        checks: &run.checks,
        status,
    };
    let bytes = json_bytes(&manifest)?;
    run.write("manifest.json", &bytes)?;
    Ok(if failing.is_empty() { Outcome::Ok } else { Outcome::Violation })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violation) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
