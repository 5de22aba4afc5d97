mod args;
mod commands;
mod error;
mod output;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn run(cli: &Cli) -> error::Result<()> {
    match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Metrics(a) => commands::metrics(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
