use std::process::ExitCode;

use clap::Parser;
use sfgeo_cli::cli::{run, Cli};
use sfgeo_cli::EXIT_ERROR;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
