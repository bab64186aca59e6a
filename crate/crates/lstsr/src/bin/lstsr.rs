fn main() {
    std::process::exit(lstsr::cli::run(std::env::args_os()));
}
