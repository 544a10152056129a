fn main() {
    std::process::exit(clipn::cli::run(std::env::args()));
}
