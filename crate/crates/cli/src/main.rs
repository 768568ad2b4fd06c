fn main() {
    std::process::exit(ripa_cli::run(std::env::args_os()));
}
