use std::process::ExitCode;

use clap::Parser;
use mpe_cli::commands::main_with;
use mpe_cli::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(main_with(Cli::parse()))
}
