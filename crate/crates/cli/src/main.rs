fn main() {
    std::process::exit(objprune_cli::run(std::env::args_os()));
}
