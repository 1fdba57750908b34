fn main() {
    std::process::exit(fracmf_cli::run(std::env::args_os()));
}
