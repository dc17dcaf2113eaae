fn main() {
    std::process::exit(hmcd::cli::run());
}
