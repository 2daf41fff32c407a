use clap::Parser;

fn main() {
    std::process::exit(phie::cli::run(phie::cli::Cli::parse()));
}
