fn main() {
    std::process::exit(undersea_cli::run(std::env::args_os()));
}
