fn main() {
    std::process::exit(mppd_cli::main_with_args(std::env::args_os()));
}
