use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match adaptaug::cli::run(adaptaug::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
