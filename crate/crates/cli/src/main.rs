fn main() {
    std::process::exit(doran_cli::run(std::env::args_os()));
}
