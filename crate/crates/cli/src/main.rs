fn main() {
    std::process::exit(dlab_cli::main_with(std::env::args_os()));
}
