fn main() {
    std::process::exit(stbln::run());
}
