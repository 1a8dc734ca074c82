use std::process::ExitCode;

fn main() -> ExitCode {
    attend_cli::main_with(std::env::args_os())
}
