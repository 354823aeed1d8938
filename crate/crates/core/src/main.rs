use clap::Parser;
use staggered_did::cli::{error_json, exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("{}", error_json(&e));
            std::process::exit(exit_code(&e));
        }
    }
}
