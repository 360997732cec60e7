use std::process::ExitCode;

fn main() -> ExitCode {
    learncert_cli::main_with_args(std::env::args_os())
}
