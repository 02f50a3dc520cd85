use clap::Parser;

use varreg::cli::{run, Cli};
use varreg::ExitCode;

fn main() {
    // VARREG_THREADS caps internal parallelism; the current implementation
    // is single-threaded, but the contract still validates the value.
    if let Ok(v) = std::env::var("VARREG_THREADS") {
        if v.parse::<usize>().map(|n| n == 0).unwrap_or(true) {
            eprintln!("error: VARREG_THREADS must be a positive integer, got {v:?}");
            std::process::exit(ExitCode::Usage as i32);
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(ExitCode::Success as i32);
            }
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().next().unwrap_or("bad arguments"));
            std::process::exit(ExitCode::Usage as i32);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code() as i32);
    }
}
