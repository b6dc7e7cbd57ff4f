fn main() {
    std::process::exit(aiq_cli::run(std::env::args_os()));
}
