fn main() {
    std::process::exit(hetero_decode::cli::main_with(std::env::args_os()));
}
