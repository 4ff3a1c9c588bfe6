use clap::Parser;

fn main() {
    let cli = urm_cli::Cli::parse();
    if let Err(e) = urm_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
