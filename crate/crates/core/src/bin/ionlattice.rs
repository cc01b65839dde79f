fn main() {
    std::process::exit(ionlattice::cli::main_with_args(std::env::args_os()));
}
