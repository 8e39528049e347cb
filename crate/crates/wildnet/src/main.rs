use std::process::ExitCode;

use clap::Parser;
use wildnet::cli::{run, Cli};

fn main() -> ExitCode {
    // clap exits 2 with usage text on bad arguments and 0 for --help/--version
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
