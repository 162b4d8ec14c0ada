fn main() {
    std::process::exit(sufisent::cli::run(std::env::args_os()));
}
