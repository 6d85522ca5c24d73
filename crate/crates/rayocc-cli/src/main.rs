//! Single entry point wiring the library together: dataset generation,
//! training, reconstruction, evaluation, benchmarking, gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Every
//! command accepts `--config file.json` whose values fill in flags that
//! were not given explicitly (flags win), and every run writes the
//! resolved configuration next to its outputs.

mod commands;

use clap::error::ErrorKind;
use clap::Parser;
use commands::{Cli, Command};
use rayocc::bench::alloc_meter::TrackingAllocator;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    };

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("failed to configure {threads} threads: {e}");
            std::process::exit(2);
        }
    }

    let result = match cli.command {
        Command::Gen(args) => commands::gen::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Infer(args) => commands::infer::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Bench(args) => commands::bench::run(args),
        Command::Gradcheck(args) => commands::gradcheck::run(args),
    };

    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}
