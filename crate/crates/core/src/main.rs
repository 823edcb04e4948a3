fn main() {
    std::process::exit(precip_post::cli::main_with_args(std::env::args_os()));
}
