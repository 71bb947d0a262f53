fn main() {
    std::process::exit(xres::cli::run(std::env::args_os()));
}
