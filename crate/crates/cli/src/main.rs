fn main() {
    std::process::exit(kollektiv_cli::main_with_args(std::env::args_os()));
}
