//! `dpq` — command-line surface for the product-quantization pipeline.
//!
//! Non-interactive and report-emitting: every command resolves its config
//! (defaults ← `--config` file ← flags), runs one library operation, writes
//! its outputs plus exactly one JSON manifest, and exits with a stable,
//! documented code (see `--help`). Failures print a single machine-parsable
//! line: `error: <kind> error: <detail>`.

mod args;
mod kv;
mod manifest;
mod run;

use clap::error::ErrorKind;
use clap::Parser;

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprintln!("error: usage error: {}", first_line(&e));
                    2
                }
            };
        }
    };

    if let Some(threads) = cli.threads {
        if threads > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
            {
                eprintln!("error: config error: could not size the thread pool: {e}");
                return 3;
            }
        }
    }

    let started = std::time::Instant::now();
    let result = run::dispatch(&cli);
    let wall_ms = started.elapsed().as_millis();
    match result {
        Ok(()) => {
            eprintln!("info: wall_time_ms={wall_ms}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// First rendered line of a clap error, without its own "error: " prefix.
fn first_line(e: &clap::Error) -> String {
    let rendered = e.to_string();
    let line = rendered.lines().next().unwrap_or("invalid arguments");
    line.strip_prefix("error: ").unwrap_or(line).to_string()
}
