fn main() {
    std::process::exit(hide_forge::cli::dispatch(std::env::args_os()));
}
