fn main() {
    std::process::exit(udts::cli::main_with_args(std::env::args_os()));
}
