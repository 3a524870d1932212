use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = obsx::cli::Args::parse();
    std::process::exit(obsx::cli::main_with(args));
}
