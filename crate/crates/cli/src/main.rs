fn main() {
    std::process::exit(contact_cli::run_cli(std::env::args_os()));
}
