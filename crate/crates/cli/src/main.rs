fn main() {
    std::process::exit(fnm_cli::main_with_args(std::env::args_os()));
}
