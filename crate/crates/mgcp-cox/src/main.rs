fn main() {
    std::process::exit(mgcp_cox::cli::cli_main(std::env::args_os()));
}
