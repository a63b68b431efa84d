fn main() {
    std::process::exit(skipgate::cli::run_cli(std::env::args_os()));
}
