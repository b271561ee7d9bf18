use std::process::ExitCode;

fn main() -> ExitCode {
    marionette::cli::main()
}
