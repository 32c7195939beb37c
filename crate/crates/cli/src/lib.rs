//! Command-line front end: scenario files, sweeps, CSV output and run
//! manifests.

pub mod commands;
pub mod error;
pub mod output;
pub mod scenario_file;
pub mod sweep;

use clap::Parser;

pub use commands::Cli;
pub use error::{CliError, EXIT_INPUT, EXIT_NONCONVERGENCE};

/// Parses `args` (without the program name), runs the command and returns
/// the process exit code.
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("scmarket".to_string()).chain(args.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    match commands::execute(&cli, args) {
        Ok(status) => {
            println!("{status}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
