use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let args = dwsim_cli::Args::parse();
    ExitCode::from(dwsim_cli::run(&args))
}
