use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(convexlab_cli::run(std::env::args_os()))
}
