use clap::Parser;
use neural_deepc::cli::{error_line, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("{}", error_line(&e));
        std::process::exit(1);
    }
}
