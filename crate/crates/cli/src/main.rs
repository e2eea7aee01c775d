fn main() {
    std::process::exit(uae3d_cli::run(std::env::args_os()));
}
