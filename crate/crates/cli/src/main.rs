use clap::Parser;

use gem2_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    match gem2_cli::run(cli.command) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
