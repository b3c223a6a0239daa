fn main() {
    std::process::exit(softq::cli::run(std::env::args()));
}
