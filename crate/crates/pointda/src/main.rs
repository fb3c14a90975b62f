fn main() {
    std::process::exit(pointda::cli::run());
}
