use clap::Parser;

fn main() {
    let cli = bufstab_cli::Cli::parse();
    std::process::exit(bufstab_cli::run(cli));
}
