fn main() { std::process::exit(siglab::cli::run()); }
