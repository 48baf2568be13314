fn main() {
    std::process::exit(radtriage::cli::run());
}
