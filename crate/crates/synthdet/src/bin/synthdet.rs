fn main() {
    std::process::exit(synthdet::cli::run(std::env::args()));
}
