fn main() {
    std::process::exit(dvib::cli::run(std::env::args_os()));
}
