fn main() {
    std::process::exit(role_clarity::cli::run(std::env::args_os()));
}
