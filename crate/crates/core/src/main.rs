fn main() {
    std::process::exit(heatvol::cli::run(std::env::args_os()));
}
