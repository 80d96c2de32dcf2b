fn main() {
    std::process::exit(primeflow::cli::run(std::env::args_os()));
}
