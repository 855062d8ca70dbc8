//! `hpcctl`: validate and render environment definitions, manage the shared
//! image store, run containers and pods against the simulated engine, and
//! drive the launch simulator.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod exec;
pub mod layout;
pub mod pod;

use std::io::Write;

use clap::Parser;

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors are reported on stderr.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match cli::Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                error::exit::INVALID
            } else {
                error::exit::OK
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("hpcctl: {e}");
            e.exit_code()
        }
    }
}
