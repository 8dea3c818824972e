use clap::Parser;

fn main() {
    let cli = psnym_cli::Cli::parse();
    if let Err(e) = psnym_cli::run(cli) {
        eprintln!("psnym: error: {e:#}");
        std::process::exit(1);
    }
}
