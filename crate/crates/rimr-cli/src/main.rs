fn main() {
    std::process::exit(rimr_cli::run(std::env::args()));
}
