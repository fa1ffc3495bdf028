fn main() {
    std::process::exit(dasa_core::cli::run(std::env::args_os()));
}
