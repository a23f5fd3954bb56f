fn main() {
    std::process::exit(passr::run());
}
