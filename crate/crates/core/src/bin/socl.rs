fn main() {
    std::process::exit(socl::cli::run(std::env::args_os()));
}
