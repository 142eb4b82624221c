fn main() {
    std::process::exit(zkstarctl::cli::run(std::env::args_os()));
}
