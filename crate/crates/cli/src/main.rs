fn main() {
    std::process::exit(ctm_cli::main_with_args(std::env::args_os()));
}
