fn main() {
    std::process::exit(citylike_cli::run(std::env::args_os()));
}
