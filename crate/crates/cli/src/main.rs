fn main() {
    std::process::exit(dbb_cli::run(std::env::args_os()));
}
