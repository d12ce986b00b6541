mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;
use timeuse_core::ErrorClass;

use crate::commands::Command;

/// Structural time-allocation pipeline: ingest or synthesize survey data,
/// query language-model agents, fit, compare, stress-test and report.
#[derive(Parser, Debug)]
#[command(name = "timeuse", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Convergence => 3,
        ErrorClass::Transport => 4,
    }
}

fn class_name(class: ErrorClass) -> &'static str {
    match class {
        ErrorClass::Usage => "usage",
        ErrorClass::Data => "data",
        ErrorClass::Convergence => "convergence",
        ErrorClass::Transport => "transport",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version go to stdout and are not failures.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    match commands::execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            let body = serde_json::json!({ "error": { "class": class_name(class), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(exit_code(class))
        }
    }
}
