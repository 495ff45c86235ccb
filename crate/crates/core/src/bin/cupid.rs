fn main() {
    std::process::exit(cupid::cli::run_from(std::env::args_os()));
}
