use std::process::ExitCode;

fn main() -> ExitCode {
    anycall::cli::main()
}
