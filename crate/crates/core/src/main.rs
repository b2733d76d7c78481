use clap::Parser;

fn main() {
    std::process::exit(meshfuzz::cli::run(meshfuzz::cli::Cli::parse()));
}
