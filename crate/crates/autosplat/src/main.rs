fn main() {
    std::process::exit(autosplat::cli::run());
}
