use clap::Parser;
use tgshuffle::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TGSHUFFLE_LOG", "info")).init();
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
