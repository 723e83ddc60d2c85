fn main() {
    std::process::exit(bohm_foliation::cli::main_with_args(std::env::args_os()));
}
