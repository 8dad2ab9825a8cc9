//! Front end for `fracmap`: resolves a [`RunConfig`] from a JSON file and flags,
//! runs one command inside a thread pool of the configured size, and writes
//! `<command>.json` plus command-specific dumps and CSVs to the output directory.
//!
//! Reports carry the resolved config and the result; wall-clock time sits in a
//! separate `timing` section so everything else is reproducible.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::time::Instant;

use clap::Parser;
use fracmap_core::error::{Error, Result};
use serde::Serialize;
use serde_json::Value;

pub use commands::{EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK};
pub use config::{Cli, Command, RunConfig};

#[derive(Serialize)]
struct Report<'a> {
    command: &'a str,
    version: &'a str,
    status: i32,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    timing: Timing,
}

#[derive(Serialize)]
struct Timing {
    seconds: f64,
}

/// Result of one invocation: exit status and the report that was written.
pub struct RunOutput {
    pub status: i32,
    pub report: String,
    pub error: Option<String>,
}

/// Run `cmd` with a resolved config; the report is written even when the command fails.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    commands::adopt_input_header(cmd, &mut cfg)?;
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let outcome = pool.install(|| commands::execute(cmd, &cfg));
    let timing = Timing { seconds: start.elapsed().as_secs_f64() };
    let (status, result, error) = match outcome {
        Ok(o) => (o.status, Some(o.result), None),
        Err(e) => (commands::exit_code(&e), None, Some(e.to_string())),
    };
    let report = Report { command: cmd.name(), version: env!("CARGO_PKG_VERSION"), status, config: &cfg, result, error: error.clone(), timing };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Usage(e.to_string()))? + "\n";
    std::fs::write(cfg.out.join(format!("{}.json", cmd.name())), &text)?;
    Ok(RunOutput { status, report: text, error })
}

/// Parse arguments, run, print, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let cfg = match RunConfig::resolve(&cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("fracmap: {e}");
            return commands::exit_code(&e);
        }
    };
    match run(cli.command, &cfg) {
        Ok(out) => {
            match cli.command {
                Command::Constants | Command::Check | Command::Perimeter => print!("{}", out.report),
                _ => println!("{}: status {} (report in {})", cli.command.name(), out.status, cfg.out.join(format!("{}.json", cli.command.name())).display()),
            }
            match &out.error {
                Some(e) => eprintln!("fracmap {}: {e}", cli.command.name()),
                None if out.status != EXIT_OK => eprintln!("fracmap {}: exit status {}", cli.command.name(), out.status),
                None => {}
            }
            out.status
        }
        Err(e) => {
            eprintln!("fracmap: {e}");
            commands::exit_code(&e)
        }
    }
}
