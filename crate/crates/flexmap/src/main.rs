fn main() {
    std::process::exit(flexmap::cli::run(std::env::args_os()));
}
