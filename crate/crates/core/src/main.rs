fn main() {
    std::process::exit(symblend::cli::main_with(std::env::args_os()));
}
