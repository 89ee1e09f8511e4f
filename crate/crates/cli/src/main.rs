use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;
use mutan_cli::args::Cli;
use mutan_cli::commands;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    let result = commands::run(&cli, &mut out);
    let flushed = out.flush();
    match (result, flushed) {
        (Ok(outcome), Ok(())) => ExitCode::from(outcome.exit_code()),
        (Ok(_), Err(e)) => {
            eprintln!("i/o error: writing output: {e}");
            ExitCode::from(3)
        }
        (Err(e), _) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
