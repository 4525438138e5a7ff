fn main() {
    std::process::exit(cnnav_cli::run(std::env::args_os()));
}
