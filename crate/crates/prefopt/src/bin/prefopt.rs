fn main() {
    let code = prefopt::cli::run_cli(std::env::args().collect());
    std::process::exit(code);
}
