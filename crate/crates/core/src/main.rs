fn main() {
    std::process::exit(posereg::cli::run(std::env::args_os()));
}
