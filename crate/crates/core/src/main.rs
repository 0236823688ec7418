fn main() {
    std::process::exit(bimamba::cli::dispatch(std::env::args_os()));
}
