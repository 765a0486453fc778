use clap::Parser;

use chvt::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(error) = cli::run(cli) {
        eprintln!("error: {error}");
        std::process::exit(cli::exit_code(&error));
    }
}
