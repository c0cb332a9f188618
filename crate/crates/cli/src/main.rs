fn main() {
    std::process::exit(incoforge_cli::run(std::env::args_os()));
}
