fn main() {
    if let Err(e) = tcagcn::cli::run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
