fn main() {
    std::process::exit(eiss::cli::main_with_args());
}
