use std::io;

fn main() {
    let code = grounded_rl::cli::run(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
