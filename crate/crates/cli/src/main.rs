use std::process::ExitCode;

use clap::Parser;
use qudit_forge::error::CliError;
use qudit_forge::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            if let CliError::Stage { artifacts, .. } = &err {
                for path in artifacts {
                    eprintln!("  {}", path.display());
                }
            }
            ExitCode::from(err.exit_code())
        }
    }
}
