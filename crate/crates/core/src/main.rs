fn main() {
    std::process::exit(adaloc::cli::main_with_args(std::env::args_os()));
}
