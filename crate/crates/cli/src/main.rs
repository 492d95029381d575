fn main() {
    if let Err(e) = cpgc_cli::run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
