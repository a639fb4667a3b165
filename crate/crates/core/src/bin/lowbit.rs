fn main() {
    std::process::exit(lowbit::cli::run(std::env::args_os()));
}
