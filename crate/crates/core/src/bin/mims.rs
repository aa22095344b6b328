fn main() {
    std::process::exit(mims::harness::cli::run(std::env::args_os()));
}
