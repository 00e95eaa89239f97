fn main() {
    std::process::exit(advfuse::cli::run(std::env::args_os()));
}
