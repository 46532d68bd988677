fn main() {
    std::process::exit(deep_preimage::cli::run());
}
