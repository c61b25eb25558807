fn main() {
    std::process::exit(tabal::cli::main_with_args(std::env::args_os()));
}
