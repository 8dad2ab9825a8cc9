fn main() {
    std::process::exit(fracmap_cli::main_with_args(std::env::args_os()));
}
