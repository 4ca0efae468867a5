fn main() {
    std::process::exit(wchamfer_cli::run(std::env::args_os()));
}
