fn main() {
    std::process::exit(cdg::cli::run(std::env::args_os()));
}
