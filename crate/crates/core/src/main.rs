fn main() {
    std::process::exit(cultureclip::cli::run());
}
