fn main() {
    std::process::exit(makgcn_cli::run(std::env::args_os()));
}
