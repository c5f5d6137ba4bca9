use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = r2seg::cli::Cli::parse();
    if let Err(e) = r2seg::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(r2seg::cli::exit_code(&e));
    }
}
