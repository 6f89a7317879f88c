fn main() {
    std::process::exit(recursim::cli::dispatch(std::env::args_os()));
}
