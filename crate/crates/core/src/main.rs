use std::process::ExitCode;

fn main() -> ExitCode {
    conflab::cli::run(std::env::args_os())
}
