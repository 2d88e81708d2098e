fn main() {
    std::process::exit(fibro_cli::run(std::env::args()));
}
