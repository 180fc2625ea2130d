fn main() {
    std::process::exit(noiseproxy::cli::run(std::env::args_os()));
}
