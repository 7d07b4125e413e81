fn main() {
    std::process::exit(synthrad_cli::main_with_args(std::env::args_os()));
}
