fn main() {
    std::process::exit(runtimebox_cli::main_with(std::env::args_os().collect()));
}
