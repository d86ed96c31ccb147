use std::process::ExitCode;

fn main() -> ExitCode {
    sense_lm::cli::main()
}
