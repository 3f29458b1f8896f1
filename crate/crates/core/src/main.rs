use clap::Parser;

use drbss::cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = execute(&cli) {
        eprintln!("drbss: {e}");
        std::process::exit(e.exit_code());
    }
}
