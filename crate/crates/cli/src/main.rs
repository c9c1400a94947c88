use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(topicmatch_cli::run_cli(std::env::args_os()) as u8)
}
