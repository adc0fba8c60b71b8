fn main() {
    std::process::exit(binomark::cli::main());
}
