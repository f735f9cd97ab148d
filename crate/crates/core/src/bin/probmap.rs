fn main() {
    std::process::exit(probmap::cli::run(std::env::args_os()));
}
