fn main() {
    std::process::exit(ordsurf::cli::main_with_args(std::env::args_os()));
}
