use clap::Parser;
use roughmerton_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("roughmerton: {e}");
        std::process::exit(e.exit_code());
    }
}
