use clap::Parser;

fn main() {
    let cli = dae_cli::Cli::parse();
    std::process::exit(dae_cli::run(cli));
}
