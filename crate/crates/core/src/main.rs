fn main() {
    std::process::exit(branchflow::cli::run_cli(std::env::args_os()));
}
