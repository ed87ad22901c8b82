fn main() { std::process::exit(mhclite_core::cli::run(std::env::args_os())); }
