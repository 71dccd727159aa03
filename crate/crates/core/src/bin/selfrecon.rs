fn main() {
    std::process::exit(selfrecon::shell::run_from_args(std::env::args_os()));
}
