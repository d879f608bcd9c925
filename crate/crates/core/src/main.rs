fn main() {
    std::process::exit(dpenet::cli::main_with_args(std::env::args_os()));
}
