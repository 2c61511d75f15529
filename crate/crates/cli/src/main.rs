use clap::Parser;

fn main() {
    let cli = agrp_cli::Cli::parse();
    if let Err(e) = agrp_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
