fn main() {
    std::process::exit(bict_cli::commands::main_with_args(std::env::args_os()));
}
