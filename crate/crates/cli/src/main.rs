mod args;
mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::commands::absolute;
use crate::error::CliError;
use crate::output::{read_manifest, OutDir, RunManifest};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_workers() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("KVE_WORKERS") else {
        return Ok(());
    };
    let workers: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&w| w > 0)
        .ok_or_else(|| CliError::config("KVE_WORKERS", format!("`{raw}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))
}

#[cfg(not(feature = "parallel"))]
fn configure_workers() -> Result<(), CliError> {
    Ok(())
}

/// Makes every path in `cmd` absolute, so a manifest replays from any
/// working directory, and returns the input files.
fn pin_paths(cmd: &mut Command) -> Vec<PathBuf> {
    match cmd {
        Command::Simulate(a) => {
            a.trace = absolute(&a.trace);
            vec![a.trace.clone()]
        }
        Command::Compare(a) => {
            a.trace = absolute(&a.trace);
            vec![a.trace.clone()]
        }
        Command::Profile(a) => {
            a.trace = absolute(&a.trace);
            vec![a.trace.clone()]
        }
        Command::Sparsity(a) => {
            a.trace = a.trace.iter().map(|p| absolute(p)).collect();
            a.trace.clone()
        }
        Command::GenTrace(a) => {
            a.output = absolute(&a.output);
            vec![]
        }
        Command::SubmodularVerify(_) | Command::Regress(_) => vec![],
        Command::Rerun(a) => vec![absolute(&a.manifest)],
    }
}

fn seed_of(cmd: &Command) -> Option<u64> {
    match cmd {
        Command::SubmodularVerify(a) => Some(a.seed),
        Command::Regress(a) => Some(a.seed),
        Command::GenTrace(a) => Some(a.seed),
        _ => None,
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_workers()?;
    let mut cmd = cli.command;
    if let Command::Rerun(r) = &cmd {
        let manifest = read_manifest(&r.manifest)?;
        if matches!(manifest.config, Command::Rerun(_)) {
            return Err(CliError::config("--manifest", "a manifest cannot record a rerun"));
        }
        cmd = manifest.config;
    }
    let inputs = pin_paths(&mut cmd);
    let mut out = OutDir::create(&cli.out_dir)?;
    let start = Instant::now();
    let violations = match &cmd {
        Command::Simulate(a) => commands::simulate(a, &mut out).map(|_| 0)?,
        Command::Compare(a) => commands::compare(a, &mut out).map(|_| 0)?,
        Command::Sparsity(a) => commands::sparsity(a, &mut out).map(|_| 0)?,
        Command::Profile(a) => commands::profile(a, &mut out).map(|_| 0)?,
        Command::SubmodularVerify(a) => commands::submodular_verify(a, &mut out)?,
        Command::Regress(a) => commands::regress(a, &mut out).map(|_| 0)?,
        Command::GenTrace(a) => commands::gen_trace(a, &mut out).map(|_| 0)?,
        Command::Rerun(_) => unreachable!("replaced by the recorded command"),
    };
    let manifest = RunManifest {
        command: cmd.name().to_string(),
        seed: seed_of(&cmd),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs,
        outputs: out.written.clone(),
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        config: cmd,
    };
    out.json("manifest.json", &manifest)?;
    if violations > 0 {
        return Err(CliError::Internal(format!("{violations} bound checks failed")));
    }
    Ok(())
}
