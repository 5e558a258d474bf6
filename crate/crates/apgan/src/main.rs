fn main() {
    std::process::exit(apgan::cli::run(std::env::args_os()));
}
