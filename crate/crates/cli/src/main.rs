fn main() {
    std::process::exit(lapose_cli::run(std::env::args_os()));
}
