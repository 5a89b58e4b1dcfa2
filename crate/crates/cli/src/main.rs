fn main() {
    std::process::exit(atlantis_cli::run_cli(std::env::args_os()));
}
