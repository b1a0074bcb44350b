fn main() {
    std::process::exit(anchorlab::cli::run(std::env::args_os()));
}
