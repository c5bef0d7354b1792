fn main() {
    std::process::exit(attnmtl::cli::run());
}
