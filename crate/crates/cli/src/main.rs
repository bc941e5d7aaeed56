use std::io::IsTerminal;
use std::process::ExitCode;

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    let tty = stdout.is_terminal();
    let code = collide_cli::run(std::env::args(), &mut stdout.lock(), &mut std::io::stderr(), tty);
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}
