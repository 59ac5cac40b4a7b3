fn main() {
    std::process::exit(occlm::cli::run(std::env::args_os()));
}
