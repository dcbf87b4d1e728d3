fn main() {
    std::process::exit(cftraj_cli::dispatch(std::env::args_os()));
}
