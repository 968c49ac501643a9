fn main() {
    std::process::exit(mslt::cli::run_from_args(std::env::args_os()));
}
