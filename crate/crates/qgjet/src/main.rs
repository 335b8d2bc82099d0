fn main() {
    std::process::exit(qgjet::cli::main_with_args(std::env::args_os()));
}
