use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match cpt_cli::run(cpt_cli::Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
