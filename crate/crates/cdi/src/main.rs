use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = cdi::cli::Cli::parse();
    let stdout = std::io::stdout();
    match cdi::cli::run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
