fn main() {
    std::process::exit(lbt_cli::run_command(std::env::args_os()));
}
