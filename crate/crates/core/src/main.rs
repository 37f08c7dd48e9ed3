fn main() {
    std::process::exit(eeg_uq::cli::run_cli(std::env::args()));
}
