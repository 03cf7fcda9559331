fn main() {
    std::process::exit(headmorph::cli::run(std::env::args_os()));
}
