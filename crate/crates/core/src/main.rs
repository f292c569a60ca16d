fn main() {
    std::process::exit(masstlab::cli::run(std::env::args_os()));
}
