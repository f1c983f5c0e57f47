use std::panic;

fn main() {
    // A panic is a bug, not bad input: report it with the internal-error code.
    let code = panic::catch_unwind(|| cepstral_guard::cli::run(std::env::args_os())).unwrap_or(3);
    std::process::exit(code);
}
