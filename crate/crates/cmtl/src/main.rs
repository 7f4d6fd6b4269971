fn main() {
    std::process::exit(cmtl::cli::run(std::env::args_os()));
}
