fn main() {
    std::process::exit(merlot::cli::run(std::env::args_os()));
}
