fn main() {
    std::process::exit(duodec::cli::run(std::env::args_os()));
}
