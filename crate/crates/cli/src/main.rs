fn main() {
    std::process::exit(planeslam_cli::run_cli(std::env::args_os()));
}
