use std::process::ExitCode;

use clap::Parser;
use hetsae_cli::{commands, config};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HETSAE_LOG", "warn")).init();
    let flags = config::Flags::parse();
    let result = config::RunConfig::from_flags(flags).and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hetsae: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
