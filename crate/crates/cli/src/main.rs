use std::process::ExitCode;

fn main() -> ExitCode {
    milodo_cli::run(std::env::args_os())
}
