use clap::Parser;

fn main() {
    let cli = os2os_cli::Cli::parse();
    if let Err(e) = os2os_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(os2os_cli::exit_code(&e));
    }
}
