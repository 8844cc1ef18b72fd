fn main() {
    std::process::exit(sdelift::cli::main_with_args(std::env::args_os()));
}
