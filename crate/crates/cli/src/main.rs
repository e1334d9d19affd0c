fn main() {
    std::process::exit(vrnet_cli::run(std::env::args_os()));
}
