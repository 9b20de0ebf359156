mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;
use svo_lc_core::error::ErrorKind;
use svo_lc_core::Error;

use crate::args::Cli;

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Runtime => "runtime",
    }
}

/// Errors go to stderr as one JSON object on one line.
fn report(kind: ErrorKind, message: &str) -> ExitCode {
    let line = serde_json::json!({
        "error": { "kind": kind_name(kind), "message": message }
    });
    eprintln!("{line}");
    ExitCode::from(exit_code(kind))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            return report(ErrorKind::Config, first);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.kind(), &flatten_message(&e)),
    }
}

fn flatten_message(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}
