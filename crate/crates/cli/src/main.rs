mod args;
mod commands;
mod folds;

use std::process::ExitCode;

use clap::Parser;
use neuronet::Error;

use crate::args::{Cli, Command};

/// Exit status for bad flags, configs and inputs the user can fix.
const EXIT_INVALID: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INVALID) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Probe(a) => commands::evaluate(a, commands::Scenario::Probe),
        Command::Finetune(a) => commands::evaluate(a, commands::Scenario::Finetune),
        Command::Crosseval(a) => commands::crosseval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ChannelNotFound(_) | Error::UnsupportedRate(_) => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}
