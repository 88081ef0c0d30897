fn main() {
    std::process::exit(codesign_core::cli::run(std::env::args_os()));
}
