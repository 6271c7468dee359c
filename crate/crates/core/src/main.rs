use clap::Parser;

use ssdlab::cli::{run_command, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run_command(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
