fn main() {
    std::process::exit(cpnet::cli::run(std::env::args_os()));
}
