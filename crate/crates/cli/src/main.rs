fn main() {
    std::process::exit(ecgrag_cli::main_with(std::env::args(), std::env::vars()));
}
