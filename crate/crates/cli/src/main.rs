fn main() {
    std::process::exit(oilcast_cli::main_with_args(std::env::args_os()));
}
