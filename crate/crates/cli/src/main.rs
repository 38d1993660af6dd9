fn main() {
    std::process::exit(afine_cli::run(std::env::args_os()));
}
