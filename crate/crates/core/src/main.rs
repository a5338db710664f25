fn main() {
    std::process::exit(stapdp::cli::run(std::env::args_os()));
}
