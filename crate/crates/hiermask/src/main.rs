//! Thin binary wrapper; all behavior lives in the library's `cli` module.

use clap::Parser;

fn main() {
    let cli = hiermask::cli::Cli::parse();
    if let Err(e) = hiermask::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
