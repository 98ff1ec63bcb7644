fn main() {
    std::process::exit(synlm::cli::main_with_args(std::env::args_os()));
}
