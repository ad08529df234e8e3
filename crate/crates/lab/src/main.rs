fn main() {
    std::process::exit(mpn_lab::cli::run(std::env::args_os()));
}
