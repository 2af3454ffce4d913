fn main() {
    std::process::exit(actpatch::cli::main_with(std::env::args_os()));
}
