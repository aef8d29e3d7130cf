fn main() {
    std::process::exit(msda_cli::run(std::env::args_os().skip(1)));
}
