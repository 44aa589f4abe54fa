fn main() {
    std::process::exit(herbs::cli::main_with_args(std::env::args_os()));
}
