use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(divforge::cli::run_cli(std::env::args().skip(1)) as u8)
}
