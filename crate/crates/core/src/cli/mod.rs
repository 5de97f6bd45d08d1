//! Command-line front end. Exit status: 0 on success, 1 on a domain error,
//! 2 on a usage error.

mod args;
mod commands;
mod config_file;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::Cli;
use args::Command;

use crate::error::Result;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Ingest(a) => commands::ingest(a),
        Command::TrainSae(a) => commands::train_sae(a),
        Command::Steer(a) => commands::steer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Vs2pp(a) => commands::vs2pp(a),
        Command::Sweep(a) => commands::sweep_cmd(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Prototypes(a) => commands::prototypes(a),
        Command::Orthogonality(a) => commands::orthogonality(a),
        Command::Coverage(a) => commands::coverage(a),
        Command::Topn(a) => commands::topn(a),
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit status. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match config_file::merge(argv) {
        Ok(a) => a,
        Err(config_file::MergeError::Io(path, e)) => {
            eprintln!("error: cannot read config {}: {e}", path.display());
            return EXIT_DOMAIN;
        }
        Err(config_file::MergeError::Usage(msg)) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let outcome = match cli.threads {
        Some(0) => {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command)),
            Err(e) => {
                eprintln!("error: thread pool: {e}");
                return EXIT_DOMAIN;
            }
        },
        None => dispatch(&cli.command),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DOMAIN
        }
    }
}
