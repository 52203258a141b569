fn main() {
    std::process::exit(transinv::cli::run());
}
