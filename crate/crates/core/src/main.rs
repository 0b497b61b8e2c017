use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(covrl::cli::run(std::env::args_os()))
}
