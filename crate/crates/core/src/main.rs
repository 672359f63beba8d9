use clap::Parser;

use qdcav::cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = execute(cli) {
        eprintln!("qdcav: {e}");
        std::process::exit(e.exit_code());
    }
}
