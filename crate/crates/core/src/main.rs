fn main() {
    std::process::exit(graphflow::cli::run_from(std::env::args_os()));
}
