use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod files;

use args::{Cli, Command};

/// Exit codes: 0 success, 1 other failure, 2 usage, 3 data, 4 state.
fn exit_code(err: &anyhow::Error) -> u8 {
    use abdesign::DesignError as E;
    for cause in err.chain() {
        if cause.is::<files::UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidConfig(_) | E::Unsupported(_) => 2,
                E::State(_) | E::BandwidthMismatch { .. } => 4,
                E::Io(_) | E::Json(_) => 1,
                _ => 3,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Design(a) => commands::design(a),
        Command::Init(a) => commands::init(a),
        Command::Assign(a) => commands::assign(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
