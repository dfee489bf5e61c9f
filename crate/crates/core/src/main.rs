fn main() {
    std::process::exit(lungseg::cli::main_with_args(std::env::args_os()));
}
