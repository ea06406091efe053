use clap::Parser;

fn main() {
    let cli = activeq_cli::Cli::parse();
    if let Err(e) = activeq_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
