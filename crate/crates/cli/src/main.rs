use std::process::ExitCode;

use clap::Parser;
use dfr_cli::cli::{exit_code, Cli, ErrorReport};

fn main() -> ExitCode {
    let invocation = Cli::parse().invocation();
    let report = match dfr_cli::execute(&invocation) {
        Ok(outcome) if outcome.passed => {
            println!("{}", invocation.output_dir.join(dfr_cli::manifest::MANIFEST_FILE).display());
            return ExitCode::SUCCESS;
        }
        Ok(_) => ErrorReport::verification_failed(),
        Err(err) => ErrorReport::from_error(&err),
    };
    eprintln!("{}", report.to_json());
    ExitCode::from(exit_code(&report) as u8)
}
