use std::process::ExitCode;

use melodapt_cli::{commands, parse, CliError, Parsed};

fn run() -> Result<String, CliError> {
    let cli = match parse(std::env::args_os())? {
        Parsed::Text(t) => return Ok(t),
        Parsed::Run(cli) => cli,
    };
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .init();
    commands::dispatch(cli)
}

fn main() -> ExitCode {
    match run() {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
