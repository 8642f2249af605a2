//! `kvzip` command-line driver: train, score, compress, eval, bench.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Settings;
use kvzip::Error;

#[derive(Parser, Debug)]
#[command(
    name = "kvzip",
    version,
    about = "KV-cache scoring, eviction and evaluation on a toy GQA transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a synthetic task and write a checkpoint to --out.
    Train(Settings),
    /// Score one generated context and write the score tensor (JSON) to --out.
    Score(Settings),
    /// Turn a score tensor into a keep-mask at --ratio; writes the bit-packed
    /// mask to --out and prints a retention summary.
    Compress(Settings),
    /// Evaluate a mask from `compress`, or sweep --ratios over --instances
    /// contexts and write the report (JSON, or CSV for a .csv path).
    Eval(Settings),
    /// Attention cost and cache memory model for --n-c, --chunk-size, --ratio.
    Bench(Settings),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Io(_) | Error::Format { .. } | Error::Json(_) => 2,
        Error::Contract(_) | Error::Capacity { .. } | Error::Divergence { .. } => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (settings, run): (Settings, fn(&Settings) -> kvzip::Result<()>) = match cli.command {
        Command::Train(s) => (s, commands::train),
        Command::Score(s) => (s, commands::score),
        Command::Compress(s) => (s, commands::compress),
        Command::Eval(s) => (s, commands::eval),
        Command::Bench(s) => (s, commands::bench),
    };
    let result = settings.resolve().and_then(|s| {
        if let Some(n) = s.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        run(&s)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
