fn main() {
    std::process::exit(uvlg::cli::run(std::env::args_os()));
}
