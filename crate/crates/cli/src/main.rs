fn main() {
    std::process::exit(veriframe_cli::run(std::env::args_os()));
}
