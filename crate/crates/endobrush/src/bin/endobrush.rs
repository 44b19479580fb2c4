use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = endobrush::cli::Cli::parse();
    match endobrush::cli::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            // one line, machine parsable: "error: <kind and details>"
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
