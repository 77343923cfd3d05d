fn main() {
    std::process::exit(maskedclip::cli::run(std::env::args_os()));
}
