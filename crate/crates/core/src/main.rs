fn main() {
    std::process::exit(iterflow::cli::main());
}
