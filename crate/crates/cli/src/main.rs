fn main() {
    std::process::exit(tilt_cli::run(std::env::args_os()));
}
