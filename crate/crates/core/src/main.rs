fn main() {
    std::process::exit(tacq::harness::cli::main_with_args(std::env::args_os()));
}
