fn main() {
    std::process::exit(mfm::cli::main_with_args(std::env::args_os()));
}
