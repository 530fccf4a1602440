fn main() {
    std::process::exit(multiclip_cli::run(std::env::args_os()));
}
