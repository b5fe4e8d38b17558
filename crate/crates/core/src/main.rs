fn main() {
    std::process::exit(drrf::cli::run(std::env::args_os().collect()));
}
