fn main() {
    std::process::exit(icth::cli::run(std::env::args_os()));
}
