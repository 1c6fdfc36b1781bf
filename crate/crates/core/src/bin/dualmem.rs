fn main() {
    std::process::exit(dualmem::harness::cli_main(std::env::args().collect()));
}
