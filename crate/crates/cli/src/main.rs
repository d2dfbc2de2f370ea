fn main() {
    std::process::exit(agct_cli::dispatch(std::env::args_os()));
}
