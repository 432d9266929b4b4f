use clap::Parser;

fn main() {
    let cli = sparseflow_cli::Cli::parse();
    if let Err(e) = sparseflow_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
