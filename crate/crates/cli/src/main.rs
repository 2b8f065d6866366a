use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(lrsms_cli::run(std::env::args_os()))
}
