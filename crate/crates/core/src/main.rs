use clap::Parser;

fn main() {
    std::process::exit(mtem::cli::run(mtem::cli::Cli::parse()));
}
