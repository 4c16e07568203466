//! `agd`: decode, attribute, evaluate, extract heads, calibrate, generate
//! toy tasks, train toy models, and judge outputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.

mod args;
mod commands;

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::Parser;
use serde::{Deserialize, Serialize};

use args::{Cli, Command};
use commands::Outcome;

#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub command: Command,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub wall_time_ms: f64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use agd_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Divergence { .. }
                | E::StaleCache(_)
                | E::InvalidDistribution(_)
                | E::IndexOutOfRange(_)
                | E::JudgeTransport(_)
                | E::EmptyVerdicts => 3,
                _ => 2,
            };
        }
        if cause.is::<serde_json::Error>() || cause.is::<std::io::Error>() {
            return 2;
        }
    }
    3
}

fn subcommand_name(cmd: &Command) -> String {
    serde_json::to_value(cmd)
        .ok()
        .and_then(|v| v["subcommand"].as_str().map(str::to_string))
        .unwrap_or_default()
}

fn execute(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::Decode(c) => commands::run_decode(c),
        Command::Attribute(c) => commands::run_attribute(c),
        Command::Eval(c) => commands::run_eval(c),
        Command::ExtractHeads(c) => commands::run_extract_heads(c),
        Command::CalibrateTau(c) => commands::run_calibrate(c),
        Command::GenTask(c) => commands::run_gen_task(c),
        Command::TrainToy(c) => commands::run_train(c),
        Command::Judge(c) => commands::run_judge(c),
        Command::Replay(_) => Err(UsageError("a manifest cannot replay a replay".into()).into()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let command = match cli.command {
        Command::Replay(r) => {
            let text = fs::read_to_string(&r.from).map_err(|e| agd_core::Error::Io {
                path: r.from.clone(),
                source: e,
            })?;
            let manifest: RunManifest = serde_json::from_str(&text)
                .map_err(|e| agd_core::Error::Data(format!("{}: {e}", r.from.display())))?;
            eprintln!("replaying {}", manifest.subcommand);
            manifest.command
        }
        other => other,
    };
    let started = agd_core::harness::unix_ms();
    let clock = Instant::now();
    let outcome = execute(&command)?;
    let manifest = RunManifest {
        subcommand: subcommand_name(&command),
        command,
        inputs: outcome.inputs,
        seed: outcome.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_ms: started,
        wall_time_ms: clock.elapsed().as_secs_f64() * 1e3,
        outputs: outcome.outputs,
    };
    let path = cli.manifest.unwrap_or_else(|| match manifest.outputs.first() {
        Some(p) => {
            let mut s = p.clone().into_os_string();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        None => PathBuf::from("agd-manifest.json"),
    });
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| {
        agd_core::Error::Io {
            path: path.clone(),
            source: e,
        }
    })?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
