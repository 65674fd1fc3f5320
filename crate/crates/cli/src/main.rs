//! `viewsift` command-line front end.
//!
//! Failures print one JSON line `{"error": <kind>, "message": <text>}` on
//! stderr and exit nonzero.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;
use commands::CliError;

const THREADS_ENV: &str = "VIEWSIFT_THREADS";

fn report(err: &CliError) -> ExitCode {
    let line = serde_json::json!({"error": err.kind(), "message": err.to_string()});
    eprintln!("{line}");
    ExitCode::from(err.exit_code())
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&CliError::from_clap(&e)),
    };
    match init_threads().and_then(|()| commands::run(cli.command)) {
        Ok(written) => {
            for path in written {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}
