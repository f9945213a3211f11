fn main() {
    std::process::exit(wmrb::cli::run());
}
