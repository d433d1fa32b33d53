use clap::Parser;
use posegu_cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        // Messages already include their sources.
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
