use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = vs30_cli::Cli::parse();
    let name = cli.command_name();
    if let Err(f) = vs30_cli::run(cli) {
        eprintln!("vs30 {name}: {f}");
        std::process::exit(1);
    }
}
