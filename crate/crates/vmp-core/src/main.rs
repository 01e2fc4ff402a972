fn main() {
    std::process::exit(vmp_core::cli::main_with_args(std::env::args_os()));
}
