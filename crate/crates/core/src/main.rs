use clap::Parser;

fn main() {
    let cli = spinlc::cli::Cli::parse();
    std::process::exit(spinlc::cli::dispatch(cli));
}
