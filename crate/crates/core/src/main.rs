fn main() {
    std::process::exit(gmpo::cli::run(std::env::args_os()));
}
