use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GIPSI_LOG", "warn")).init();
    let cli = gipsi::cli::Cli::parse();
    std::process::exit(gipsi::cli::run(&cli));
}
