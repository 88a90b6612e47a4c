fn main() {
    std::process::exit(rgbt::cli::run(std::env::args_os()));
}
