fn main() {
    std::process::exit(matchflow::cli::run(std::env::args_os()));
}
