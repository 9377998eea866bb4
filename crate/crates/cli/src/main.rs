fn main() {
    std::process::exit(mtn_cli::main_with(std::env::args_os()));
}
