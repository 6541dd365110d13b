fn main() {
    std::process::exit(gsno::cli::run());
}
