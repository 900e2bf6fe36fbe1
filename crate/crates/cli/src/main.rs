mod args;
mod commands;
mod resolve;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

use args::Cli;
use resolve::Failure;

/// Failure report on stderr: one JSON object per line.
fn report(f: &Failure) {
    let line = serde_json::json!({
        "status": "error",
        "kind": f.kind(),
        "code": f.code(),
        "message": f.message(),
    });
    eprintln!("{line}");
}

fn run(argv: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{}", e.render());
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let f = Failure::Usage(first.trim_start_matches("error: ").to_string());
            report(&f);
            return f.code();
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            report(&f);
            f.code()
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    std::process::exit(run(std::env::args_os()));
}
