fn main() {
    std::process::exit(capdet::cli::run(std::env::args_os()));
}
