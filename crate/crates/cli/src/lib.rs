//! Command-line front end: generate, train, forecast, evaluate and
//! pipeline over the `oilcast` forecasters.

pub mod commands;
pub mod config;
pub mod files;
pub mod log;
pub mod model;

use std::ffi::OsString;

use clap::Parser;
use oilcast::{Error, Result};

use crate::config::{Command, Flags, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "oilcast", version, about = "Probabilistic oil production forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

/// 3 for numeric failures, 4 for I/O, 2 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => 3,
        Error::Io(_) => 4,
        _ => 2,
    }
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg.command {
        Command::Generate => commands::generate(cfg),
        Command::Train => commands::train(cfg).map(drop),
        Command::Forecast => commands::forecast(cfg).map(drop),
        Command::Evaluate => commands::evaluate(cfg).map(|r| print!("{}", r.to_text())),
        Command::Pipeline => commands::pipeline(cfg).map(|r| print!("{}", r.to_text())),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match RunConfig::resolve(cli.command, &cli.flags).and_then(|cfg| run(&cfg)) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            log::event("error", &[("command", cli.command.to_string()), ("code", code.to_string()), ("msg", e.to_string())]);
            code
        }
    }
}
