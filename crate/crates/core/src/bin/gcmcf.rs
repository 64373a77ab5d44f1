fn main() {
    std::process::exit(gcmcf::cli::run(std::env::args_os()));
}
