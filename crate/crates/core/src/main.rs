use clap::Parser;

fn main() {
    let cli = activemri::cli::Cli::parse();
    if let Err(e) = activemri::cli::run_cli(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
