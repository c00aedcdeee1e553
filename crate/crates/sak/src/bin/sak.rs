fn main() {
    if let Err(err) = sak::cli::run() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
