//! `hiseg` command-line front end.

mod args;
mod commands;
mod fetch;
mod render;
mod setup;

use std::process::ExitCode;

use clap::Parser;
use hiseg_core::harness::EvalMode;
use hiseg_core::Result;
use hiseg_models::WeightsRoot;

use args::{Cli, Command};

fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Segment {
            image,
            categories,
            save_scores,
        } => commands::segment(c, image, categories, *save_scores),
        Command::Eval {
            data,
            manifest,
            save_predictions,
        } => commands::eval(c, data, manifest.as_deref(), *save_predictions, EvalMode::Full),
        Command::PseudoMasks { data } => commands::eval(c, data, None, false, EvalMode::PseudoMasks),
        Command::Dump {
            kind,
            image,
            categories,
            points,
        } => commands::dump(c, *kind, image, categories, points),
        Command::FetchWeights { ids, force } => fetch::fetch(&WeightsRoot::from_env(), ids, *force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hiseg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
