fn main() {
    std::process::exit(flashmem::cli::run(std::env::args_os()));
}
