fn main() {
    std::process::exit(gsc::cli::run_cli(std::env::args_os()));
}
