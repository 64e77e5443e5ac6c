use std::process::ExitCode;

use clap::Parser;
use lsaf_cli::error::{EXIT_OK, EXIT_USAGE};
use lsaf_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LSAF_LOG", "info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };

    if let Ok(n) = std::env::var("LSAF_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("LSAF_THREADS ignored: {e}");
                }
            }
            _ => {
                eprintln!("error: LSAF_THREADS must be a positive integer, got `{n}`");
                return ExitCode::from(EXIT_USAGE);
            }
        }
    }

    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
