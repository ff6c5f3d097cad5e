use std::process::ExitCode;

fn main() -> ExitCode {
    match hiersoc::cli::main_with_args(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hiersoc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
