fn main() {
    std::process::exit(tsdiff::cli::run_command(std::env::args_os()));
}
