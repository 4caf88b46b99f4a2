fn main() {
    std::process::exit(brakekit_cli::main_with_args(std::env::args_os()));
}
