fn main() {
    std::process::exit(bertv_cli::run(std::env::args_os()));
}
