fn main() {
    std::process::exit(crtsim::cli::run(std::env::args_os()));
}
