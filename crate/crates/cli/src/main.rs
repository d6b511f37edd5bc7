use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

mod args;
mod commands;
mod run;

use args::Cli;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    ExitCode::from(dispatch(argv))
}

fn dispatch(argv: Vec<String>) -> u8 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            let mut cmd = Cli::command();
            let known = argv.get(1).and_then(|name| cmd.find_subcommand_mut(name)).is_some();
            if !known {
                eprintln!("\n{}", cmd.render_help());
            }
            return EXIT_USAGE;
        }
    };
    match commands::execute(cli.command, argv.into_iter().skip(1).collect()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}
