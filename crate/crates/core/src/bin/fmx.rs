fn main() {
    std::process::exit(fmx_core::cli::main_with_args(std::env::args_os()));
}
