use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    tamcl::cli::init_logging();
    match tamcl::cli::run(tamcl::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
