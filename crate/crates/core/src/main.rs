fn main() {
    std::process::exit(pccnn::cli::run(std::env::args_os()));
}
