fn main() {
    std::process::exit(s6snn::cli::run(std::env::args_os()));
}
