use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = unibev_cli::Cli::parse();
    if let Err(e) = unibev_cli::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
