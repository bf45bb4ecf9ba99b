fn main() {
    std::process::exit(spider::cli::run(std::env::args_os()));
}
