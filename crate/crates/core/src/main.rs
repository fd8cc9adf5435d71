use std::io;

fn main() {
    let code = latebind_core::cli::run_cli(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
