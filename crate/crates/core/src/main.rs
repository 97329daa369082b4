fn main() {
    std::process::exit(distnewton::cli::main_with(std::env::args_os()));
}
