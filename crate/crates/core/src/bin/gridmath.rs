fn main() {
    std::process::exit(gridmath::cli::run(std::env::args_os()));
}
