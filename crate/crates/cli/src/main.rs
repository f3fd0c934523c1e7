use clap::Parser;
use relstable_cli::{exit_status, run, Cli};

fn main() {
    let cli = Cli::parse();
    let result = cli.config().and_then(|cfg| run(cli.command, &cfg));
    if let Err(e) = &result {
        eprintln!("relstable {}: {e}", cli.command.name());
    }
    std::process::exit(exit_status(&result));
}
