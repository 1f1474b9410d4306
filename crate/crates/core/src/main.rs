use clap::Parser;

fn main() {
    let cli = hsanet::cli::Cli::parse();
    std::process::exit(hsanet::cli::run(cli));
}
