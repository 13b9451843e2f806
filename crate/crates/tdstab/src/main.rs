use clap::Parser;

fn main() {
    let cli = tdstab::cli::Cli::parse();
    std::process::exit(tdstab::cli::run(cli));
}
