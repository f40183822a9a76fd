fn main() {
    std::process::exit(sparsebayes::cli::run(std::env::args_os()));
}
