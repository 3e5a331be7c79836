use clap::Parser;
use pairdiff_cli::{error, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => {
            eprintln!("{}", error::render(&e));
            std::process::exit(error::categorize(&e).exit_code());
        }
    }
}
