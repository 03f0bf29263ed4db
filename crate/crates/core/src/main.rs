fn main() {
    std::process::exit(setpool::cli::run(std::env::args_os()));
}
