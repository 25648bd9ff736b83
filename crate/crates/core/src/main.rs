fn main() {
    std::process::exit(ctc_nmt::cli::run(std::env::args_os()));
}
