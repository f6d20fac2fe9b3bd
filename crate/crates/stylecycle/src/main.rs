fn main() {
    std::process::exit(stylecycle::cli::main_with_args(std::env::args_os()));
}
