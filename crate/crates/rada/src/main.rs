fn main() {
    std::process::exit(rada::run());
}
