fn main() {
    std::process::exit(emers::cli::main_with_args(std::env::args_os()));
}
