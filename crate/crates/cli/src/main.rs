fn main() {
    std::process::exit(atomic_nli_cli::cli::main_with_args(std::env::args_os()));
}
