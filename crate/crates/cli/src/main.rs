fn main() {
    std::process::exit(tcm_cli::main_with_args(std::env::args_os()));
}
