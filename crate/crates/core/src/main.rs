fn main() {
    std::process::exit(pof::cli::run(std::env::args_os()));
}
