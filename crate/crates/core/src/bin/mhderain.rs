use std::process::ExitCode;

fn main() -> ExitCode {
    mhderain::cli::main()
}
