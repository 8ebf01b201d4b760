fn main() {
    std::process::exit(mixhic::cli::run(std::env::args_os()));
}
