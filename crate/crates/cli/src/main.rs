fn main() {
    std::process::exit(steered_cli::run(std::env::args_os()));
}
