fn main() {
    std::process::exit(octa_restore::cli::dispatch(std::env::args_os()));
}
