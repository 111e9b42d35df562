fn main() {
    std::process::exit(epcl::cli::run(std::env::args_os()));
}
