fn main() {
    std::process::exit(avaca::cli::run(std::env::args_os()));
}
