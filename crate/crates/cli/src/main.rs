fn main() {
    std::process::exit(triflow_cli::run_cli(std::env::args_os()));
}
