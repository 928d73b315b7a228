fn main() {
    std::process::exit(agrocausal::cli::run(std::env::args_os()));
}
