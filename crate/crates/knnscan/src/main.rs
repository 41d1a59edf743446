use std::process::ExitCode;

fn main() -> ExitCode {
    match knnscan::cli::main_entry(std::env::args()) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
