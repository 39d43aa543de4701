fn main() {
    std::process::exit(mkl_core::cli::main_with(std::env::args_os()));
}
