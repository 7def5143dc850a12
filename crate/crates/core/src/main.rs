use std::process::ExitCode;

fn main() -> ExitCode {
    evoloss::cli::main()
}
