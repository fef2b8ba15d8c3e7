fn main() {
    std::process::exit(mfg_moments::cli::execute(std::env::args_os()));
}
