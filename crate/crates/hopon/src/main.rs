use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let outcome = hopon::execute(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    ExitCode::from(outcome.code)
}
