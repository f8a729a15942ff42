use std::process::ExitCode;

use clap::Parser;

mod cli;
mod commands;
mod config;

use cli::{Cli, Command};
use commands::UsageError;
use config::RunConfig;

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Split(args) => commands::split(config, args),
        Command::Search(args) => commands::search(config, args),
        Command::Classify(args) => commands::classify(config, args),
        Command::Fuse(args) => commands::fuse(config, args),
        Command::Eval(args) => commands::eval(config, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if err.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {err}");
            eprintln!("\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
