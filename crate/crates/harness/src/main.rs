use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(loracomp_harness::cli::run(std::env::args_os()))
}
