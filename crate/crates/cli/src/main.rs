use clap::Parser;

fn main() {
    let cli = e2ea_cli::Cli::parse();
    if let Err(e) = e2ea_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
