fn main() {
    std::process::exit(concatmc::cli::main_with_args(std::env::args_os()));
}
