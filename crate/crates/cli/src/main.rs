use std::process::ExitCode;

use clap::Parser;
use metactc_cli::cli::{run, Cli};
use metactc_cli::CliError;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).map_err(anyhow::Error::from) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("metactc: {err:#}");
            let code = err
                .downcast_ref::<CliError>()
                .map_or(1, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
