fn main() {
    std::process::exit(singlq::cli::run());
}
