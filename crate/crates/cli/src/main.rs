fn main() {
    std::process::exit(premsel_cli::dispatch(std::env::args_os()));
}
