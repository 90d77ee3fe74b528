fn main() {
    std::process::exit(tinyrm::cli::run(std::env::args_os()));
}
