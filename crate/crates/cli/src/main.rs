fn main() {
    std::process::exit(crosspath_cli::main_with(std::env::args().collect()));
}
