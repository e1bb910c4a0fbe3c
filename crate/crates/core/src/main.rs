use clap::Parser;

fn main() {
    let cli = mmvm::cli::Cli::parse();
    std::process::exit(mmvm::cli::run(cli));
}
