mod args;
mod bench;
mod files;
mod pipeline;
mod sim;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Invalid arguments detected after parsing. Exits with code 1 like a clap
/// parse failure; every other error is a data error (code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Clahe(a) => pipeline::clahe(a),
        Command::Simgen(a) => sim::simgen(a),
        Command::VocabTrain(a) => pipeline::vocab_train(a),
        Command::DbBuild(a) => pipeline::db_build(a),
        Command::DbQuery(a) => pipeline::db_query(a),
        Command::Loopdetect(a) => pipeline::loopdetect(a),
        Command::MapBuild(a) => sim::map_build(a),
        Command::Reloc(a) => sim::reloc(a),
        Command::EvalRecall(a) => pipeline::eval_recall(a),
        Command::Timelapse(a) => sim::timelapse(a),
        Command::Bench(a) => bench::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
