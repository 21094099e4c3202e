fn main() {
    std::process::exit(flowreg_cli::run(std::env::args_os()));
}
