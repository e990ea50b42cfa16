use std::process::ExitCode;

use clap::Parser;
use policy_did::cli::{run, Cli};

fn main() -> ExitCode {
    ExitCode::from(run(&Cli::parse()))
}
